use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, Sample, DEFAULT_PAD_MULTIPLE, DEFAULT_TARGET_WIDTH};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound on the standard deviation used by z-scoring.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZScoreMode {
    /// One mean and std over all channels of the image.
    #[default]
    Joint,
    PerChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_width: usize,
    pub multiple: usize,
    pub zscore: ZScoreMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_width: DEFAULT_TARGET_WIDTH,
            multiple: DEFAULT_PAD_MULTIPLE,
            zscore: ZScoreMode::Joint,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Multiplicative contrast factor range.
    pub contrast: (f32, f32),
    /// Additive brightness range, in z-score units.
    pub brightness: (f32, f32),
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rotation_prob: f64,
    /// Degrees.
    pub rotation_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            contrast: (0.8, 1.2),
            brightness: (-0.2, 0.2),
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotation_prob: 0.5,
            rotation_range: (1.0, 360.0),
        }
    }
}

fn image_dims(image: &Tensor<f32>) -> (usize, usize, usize) {
    let s = image.shape();
    (s[0], s[1], s[2])
}

/// Bilinear resize of a `c x h x w` tensor with half-pixel centers.
pub fn resize_bilinear(image: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let (c, h, w) = image_dims(image);
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let src = image.data();
    let mut out = vec![0.0f32; c * oh * ow];
    let axis = |dst: usize, scale: f64, n: usize| {
        let p = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let xs: Vec<_> = (0..ow).map(|x| axis(x, sx, w)).collect();
    for y in 0..oh {
        let (y0, y1, fy) = axis(y, sy, h);
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let row = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            for (o, &(x0, x1, fx)) in row.iter_mut().zip(&xs) {
                let top = plane[y0 * w + x0] as f64 * (1.0 - fx) + plane[y0 * w + x1] as f64 * fx;
                let bot = plane[y1 * w + x0] as f64 * (1.0 - fx) + plane[y1 * w + x1] as f64 * fx;
                *o = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out).expect("resize extent")
}

fn resize_nearest(mask: &BinaryMask, oh: usize, ow: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let pick = |dst: usize, n: usize, on: usize| (((dst as f64 + 0.5) * n as f64 / on as f64) as usize).min(n - 1);
    BinaryMask::from_fn(oh, ow, |y, x| mask.get(pick(y, h, oh), pick(x, w, ow)) == 1)
}

fn pad_image(image: &Tensor<f32>, ph: usize, pw: usize) -> Tensor<f32> {
    let (c, h, w) = image_dims(image);
    let mut out = Tensor::zeros(&[c, ph, pw]);
    let (src, dst) = (image.data(), out.data_mut());
    for ch in 0..c {
        for y in 0..h {
            dst[(ch * ph + y) * pw..][..w].copy_from_slice(&src[(ch * h + y) * w..][..w]);
        }
    }
    out
}

fn pad_mask(mask: &BinaryMask, ph: usize, pw: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    BinaryMask::from_fn(ph, pw, |y, x| y < h && x < w && mask.get(y, x) == 1)
}

/// Scales to `target_width` keeping the aspect ratio, then zero-pads the
/// bottom and right so both extents are multiples of `multiple`. The pad is
/// recorded in `valid`.
pub fn resize_and_pad(sample: &Sample, target_width: usize, multiple: usize) -> Result<Sample> {
    sample.check_consistent()?;
    let (h, w) = (sample.height(), sample.width());
    if h == 0 || w == 0 || target_width == 0 || multiple == 0 {
        return Err(Error::invalid(
            "resize_and_pad",
            format!("extents must be positive (image {h}x{w}, width {target_width}, multiple {multiple})"),
        ));
    }
    let nh = ((h as f64 * target_width as f64 / w as f64).round() as usize).max(1);
    let nw = target_width;
    let ph = nh.div_ceil(multiple) * multiple;
    let pw = nw.div_ceil(multiple) * multiple;

    let same = (nh, nw) == (h, w);
    let image = if same {
        sample.image.clone()
    } else {
        resize_bilinear(&sample.image, nh, nw)
    };
    let rs = |m: &BinaryMask| {
        if same {
            m.clone()
        } else {
            resize_nearest(m, nh, nw)
        }
    };
    let mask = rs(&sample.mask);
    let roi = sample.roi.as_ref().map(rs);
    let valid = rs(&sample.valid);

    Ok(Sample {
        id: sample.id.clone(),
        split: sample.split,
        image: pad_image(&image, ph, pw),
        mask: pad_mask(&mask, ph, pw),
        roi: roi.map(|r| pad_mask(&r, ph, pw)),
        valid: pad_mask(&valid, ph, pw),
        original_size: sample.original_size,
        content_size: (nh, nw),
    })
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> Option<(f64, f64)> {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return None;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Some((mean, var.sqrt()))
}

/// Normalizes over the pixels where `select` is set; unselected pixels become 0.
fn zscore_where(image: &Tensor<f32>, mode: ZScoreMode, select: Option<&BinaryMask>) -> Tensor<f32> {
    let (c, h, w) = image_dims(image);
    let hw = h * w;
    let on = |i: usize| select.is_none_or(|m| m.data()[i] == 1);
    let groups: Vec<std::ops::Range<usize>> = match mode {
        ZScoreMode::Joint => std::iter::once(0..c).collect(),
        ZScoreMode::PerChannel => (0..c).map(|ch| ch..ch + 1).collect(),
    };
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for chans in groups {
        let vals = chans
            .clone()
            .flat_map(|ch| (0..hw).filter(move |&i| on(i)).map(move |i| src[ch * hw + i] as f64));
        let Some((mean, std)) = mean_std(vals.clone()) else {
            continue;
        };
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo == hi {
            // Constant input: exactly zero rather than rounding noise.
            continue;
        }
        let std = std.max(STD_FLOOR);
        for ch in chans {
            for i in (0..hw).filter(|&i| on(i)) {
                out[ch * hw + i] = ((src[ch * hw + i] as f64 - mean) / std) as f32;
            }
        }
    }
    Tensor::from_vec(image.shape(), out).expect("same shape")
}

/// Per-image z-score normalization of a `c x h x w` image.
pub fn zscore_normalize(image: &Tensor<f32>, mode: ZScoreMode) -> Tensor<f32> {
    zscore_where(image, mode, None)
}

/// Z-scores using statistics of the valid (unpadded) pixels only; the pad stays 0.
pub fn normalize_sample(sample: &Sample, mode: ZScoreMode) -> Sample {
    Sample {
        image: zscore_where(&sample.image, mode, Some(&sample.valid)),
        ..sample.clone()
    }
}

/// Resize, pad and normalize: everything applied before augmentation.
pub fn prepare(sample: &Sample, cfg: &PreprocessConfig) -> Result<Sample> {
    let resized = resize_and_pad(sample, cfg.target_width, cfg.multiple)?;
    Ok(normalize_sample(&resized, cfg.zscore))
}

/// Applies the same pixel remapping `(y, x) <- src(y, x)` to every plane.
fn remap(sample: &Sample, f: impl Fn(usize, usize) -> (usize, usize)) -> Sample {
    let (c, h, w) = image_dims(&sample.image);
    let src = sample.image.data();
    let mut data = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = f(y, x);
            for ch in 0..c {
                data[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    let m = |mask: &BinaryMask| {
        BinaryMask::from_fn(h, w, |y, x| {
            let (sy, sx) = f(y, x);
            mask.get(sy, sx) == 1
        })
    };
    Sample {
        image: Tensor::from_vec(&[c, h, w], data).expect("same shape"),
        mask: m(&sample.mask),
        roi: sample.roi.as_ref().map(m),
        valid: m(&sample.valid),
        ..sample.clone()
    }
}

pub fn flip_horizontal(sample: &Sample) -> Sample {
    let w = sample.width();
    remap(sample, |y, x| (y, w - 1 - x))
}

pub fn flip_vertical(sample: &Sample) -> Sample {
    let h = sample.height();
    remap(sample, |y, x| (h - 1 - y, x))
}

fn cos_sin(degrees: f64) -> (f64, f64) {
    // Snap quarter turns so they stay exact on the pixel lattice.
    let r = degrees.rem_euclid(360.0);
    for (q, cs) in [
        (0.0, (1.0, 0.0)),
        (90.0, (0.0, 1.0)),
        (180.0, (-1.0, 0.0)),
        (270.0, (0.0, -1.0)),
        (360.0, (1.0, 0.0)),
    ] {
        if r == q {
            return cs;
        }
    }
    let t = r.to_radians();
    (t.cos(), t.sin())
}

/// Rotates counter-clockwise by `degrees` about the image center, keeping the
/// extent. Image is bilinear, masks are nearest; pixels mapped from outside
/// are zero and leave `valid`.
pub fn rotate(sample: &Sample, degrees: f64) -> Sample {
    let (c, h, w) = image_dims(&sample.image);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (cos, sin) = cos_sin(degrees);
    // Inverse map: output pixel -> source coordinate.
    let source = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
    };
    let inside = |sy: f64, sx: f64| sy > -0.5 && sx > -0.5 && sy < h as f64 - 0.5 && sx < w as f64 - 0.5;

    let src = sample.image.data();
    let mut data = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source(y, x);
            if !inside(sy, sx) {
                continue;
            }
            let (py, px) = (sy.clamp(0.0, (h - 1) as f64), sx.clamp(0.0, (w - 1) as f64));
            let (y0, x0) = (py.floor() as usize, px.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (py - y0 as f64, px - x0 as f64);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                data[(ch * h + y) * w + x] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    let m = |mask: &BinaryMask| {
        BinaryMask::from_fn(h, w, |y, x| {
            let (sy, sx) = source(y, x);
            inside(sy, sx) && mask.get(sy.round() as usize, sx.round() as usize) == 1
        })
    };
    Sample {
        image: Tensor::from_vec(&[c, h, w], data).expect("same shape"),
        mask: m(&sample.mask),
        roi: sample.roi.as_ref().map(m),
        valid: m(&sample.valid),
        ..sample.clone()
    }
}

/// Random flips, rotation, contrast and brightness. Geometric operations move
/// image and masks together; photometric ones touch valid image pixels only.
/// Every draw is taken unconditionally so the stream layout never depends on
/// earlier outcomes.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let hflip = rng.random::<f64>() < cfg.hflip_prob;
    let vflip = rng.random::<f64>() < cfg.vflip_prob;
    let rot = rng.random::<f64>() < cfg.rotation_prob;
    let angle = cfg.rotation_range.0 + rng.random::<f64>() * (cfg.rotation_range.1 - cfg.rotation_range.0);
    let contrast = cfg.contrast.0 + rng.random::<f32>() * (cfg.contrast.1 - cfg.contrast.0);
    let brightness = cfg.brightness.0 + rng.random::<f32>() * (cfg.brightness.1 - cfg.brightness.0);

    let mut s = sample.clone();
    if hflip {
        s = flip_horizontal(&s);
    }
    if vflip {
        s = flip_vertical(&s);
    }
    if rot {
        s = rotate(&s, angle);
    }
    let hw = s.height() * s.width();
    let valid = s.valid.data().to_vec();
    for (i, v) in s.image.data_mut().iter_mut().enumerate() {
        if valid[i % hw] == 1 {
            *v = *v * contrast + brightness;
        }
    }
    s
}

/// Aligned `size x size` crop at an rng-chosen origin.
pub fn random_crop<R: Rng + ?Sized>(sample: &Sample, size: usize, rng: &mut R) -> Result<Sample> {
    let (c, h, w) = image_dims(&sample.image);
    if h < size || w < size || size == 0 {
        return Err(Error::invalid(
            "random_crop",
            format!("`{}` is {h}x{w}, smaller than crop {size}", sample.id),
        ));
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    let src = sample.image.data();
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            data.extend_from_slice(&src[(ch * h + y) * w + left..][..size]);
        }
    }
    let crop = |m: &BinaryMask| m.crop(top, left, size, size);
    Ok(Sample {
        image: Tensor::from_vec(&[c, size, size], data)?,
        mask: crop(&sample.mask),
        roi: sample.roi.as_ref().map(crop),
        valid: crop(&sample.valid),
        ..sample.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::rng::seeded;

    fn synthetic(h: usize, w: usize, seed: u64) -> Sample {
        let mut rng = seeded(seed);
        let image = Tensor::uniform(&[3, h, w], 0.0, 255.0, &mut rng);
        let mask = BinaryMask::from_fn(h, w, |y, x| (y * 7 + x * 3) % 5 == 0);
        Sample {
            id: "s".into(),
            split: Split::Train,
            image,
            mask,
            roi: Some(BinaryMask::from_fn(h, w, |y, _| y > 0)),
            valid: BinaryMask::ones(h, w),
            original_size: (h, w),
            content_size: (h, w),
        }
    }

    #[test]
    fn drive_extent_resizes_and_pads() {
        let s = resize_and_pad(&synthetic(584, 565, 1), 640, 16).unwrap();
        assert_eq!(s.content_size, (662, 640));
        assert_eq!((s.height(), s.width()), (672, 640));
        assert_eq!(s.valid.count_ones(), 662 * 640);
        assert!(s.image.data()[(2 * 672 + 670) * 640..][..640].iter().all(|&v| v == 0.0));
        s.check_consistent().unwrap();
    }

    #[test]
    fn fixed_point_is_unchanged() {
        let s = synthetic(32, 640, 2);
        assert_eq!(resize_and_pad(&s, 640, 16).unwrap(), s);
    }

    #[test]
    fn zscore_statistics_and_constant_guard() {
        let s = synthetic(20, 30, 3);
        let z = zscore_normalize(&s.image, ZScoreMode::Joint);
        let vals: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
        let (m, sd) = mean_std(vals.iter().copied()).unwrap();
        assert!(m.abs() < 1e-5 && (sd - 1.0).abs() < 1e-4, "{m} {sd}");
        let c = Tensor::full(&[3, 4, 4], 7.5f32);
        assert!(zscore_normalize(&c, ZScoreMode::Joint).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_zscore_ignores_pad() {
        let s = resize_and_pad(&synthetic(20, 30, 4), 32, 16).unwrap();
        let n = normalize_sample(&s, ZScoreMode::Joint);
        let hw = n.height() * n.width();
        let valid: Vec<f64> = (0..3 * hw)
            .filter(|i| n.valid.data()[i % hw] == 1)
            .map(|i| n.image.data()[i] as f64)
            .collect();
        let (m, sd) = mean_std(valid.iter().copied()).unwrap();
        assert!(m.abs() < 1e-5 && (sd - 1.0).abs() < 1e-4);
        assert!((0..3 * hw)
            .filter(|i| n.valid.data()[i % hw] == 0)
            .all(|i| n.image.data()[i] == 0.0));
    }

    #[test]
    fn quarter_turns_are_exact() {
        let s = synthetic(9, 9, 5);
        let r = rotate(&rotate(&rotate(&rotate(&s, 90.0), 90.0), 90.0), 90.0);
        assert_eq!(r, s);
        assert_eq!(rotate(&s, 90.0).mask.count_ones(), s.mask.count_ones());
    }

    #[test]
    fn rotation_fill_leaves_valid() {
        let s = synthetic(16, 16, 6);
        let r = rotate(&s, 45.0);
        assert!(r.valid.count_ones() < 256);
        assert_eq!(r.valid.get(0, 0), 0);
    }

    #[test]
    fn crop_of_crop_sized_image_is_identity() {
        let s = synthetic(8, 8, 7);
        assert_eq!(random_crop(&s, 8, &mut seeded(0)).unwrap(), s);
        assert!(random_crop(&s, 9, &mut seeded(0)).is_err());
    }
}
