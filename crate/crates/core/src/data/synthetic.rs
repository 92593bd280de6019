//! Procedural fundus-like images with known vessel masks.
//!
//! Used by tests, benchmarks and smoke runs where the real datasets are not
//! available. Vessels are random-walk polylines drawn darker than the
//! background, mostly in the green channel, as in real fundus photographs.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::io::{write_mask_png, write_rgb_png};
use super::{BinaryMask, DatasetKind, Sample, Split};
use crate::error::Result;
use crate::rng::purpose_stream;
use crate::tensor::Tensor;

/// A `h x w` image with a circular field of view and a branching vessel tree.
pub fn synthetic_fundus(id: &str, h: usize, w: usize, seed: u64) -> Sample {
    let mut rng = purpose_stream(seed, id);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let radius = 0.48 * h.min(w) as f64;
    let roi = BinaryMask::from_fn(h, w, |y, x| {
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        dy * dy + dx * dx <= radius * radius
    });

    let mut vessel = vec![0.0f64; h * w];
    let trunks = 3 + (h.min(w) / 48).min(5);
    let mut stack: Vec<(f64, f64, f64, f64, usize)> = (0..trunks)
        .map(|_| {
            let a = rng.random::<f64>() * 2.0 * PI;
            let r = radius * 0.15 * rng.random::<f64>();
            (
                cy + r * a.sin(),
                cx + r * a.cos(),
                a,
                1.2 + rng.random::<f64>() * 1.6,
                0,
            )
        })
        .collect();
    while let Some((mut y, mut x, mut a, width, depth)) = stack.pop() {
        let len = (0.25 + 0.35 * rng.random::<f64>()) * radius * 0.8f64.powi(depth as i32);
        let steps = len as usize;
        for s in 0..steps {
            a += (rng.random::<f64>() - 0.5) * 0.35;
            y += a.sin();
            x += a.cos();
            stamp(&mut vessel, h, w, y, x, width);
            if depth < 3 && s > 4 && rng.random::<f64>() < 0.04 {
                let turn = if rng.random::<bool>() { 0.6 } else { -0.6 };
                stack.push((y, x, a + turn, (width * 0.75).max(0.6), depth + 1));
            }
        }
    }

    let mask = BinaryMask::from_fn(h, w, |y, x| roi.get(y, x) == 1 && vessel[y * w + x] >= 0.5);
    let mut data = vec![0.0f32; 3 * h * w];
    let base = [170.0, 85.0, 40.0];
    let depth = [25.0, 50.0, 15.0];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if roi.get(y, x) == 0 {
                continue;
            }
            let (dy, dx) = ((y as f64 - cy) / radius, (x as f64 - cx) / radius);
            let shade = 1.0 - 0.35 * (dy * dy + dx * dx);
            let v = vessel[i].min(1.0);
            for c in 0..3 {
                let noise = (rng.random::<f64>() - 0.5) * 6.0;
                data[c * h * w + i] = (base[c] * shade - depth[c] * v + noise).clamp(0.0, 255.0) as f32;
            }
        }
    }
    Sample {
        id: id.to_string(),
        split: Split::Train,
        image: Tensor::from_vec(&[3, h, w], data).expect("extent"),
        mask,
        roi: Some(roi),
        valid: BinaryMask::ones(h, w),
        original_size: (h, w),
        content_size: (h, w),
    }
}

fn stamp(vessel: &mut [f64], h: usize, w: usize, cy: f64, cx: f64, width: f64) {
    let r = width / 2.0 + 1.0;
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
    for y in y0..y1 {
        for x in x0..x1 {
            let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
            let v = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
            let cell = &mut vessel[y * w + x];
            *cell = cell.max(v);
        }
    }
}

/// File stems in the naming convention of each dataset kind.
pub fn dataset_stems(kind: DatasetKind, custom_count: usize) -> Vec<String> {
    match kind {
        DatasetKind::Drive => (1..=20)
            .map(|i| format!("{i:02}_test"))
            .chain((21..=40).map(|i| format!("{i:02}_training")))
            .collect(),
        DatasetKind::Stare => (1..=20).map(|i| format!("im{i:04}")).collect(),
        DatasetKind::Chase => (1..=14)
            .flat_map(|i| [format!("Image_{i:02}L"), format!("Image_{i:02}R")])
            .collect(),
        DatasetKind::Hrf => ["dr", "g", "h"]
            .iter()
            .flat_map(|c| (1..=15).map(move |i| format!("{i:02}_{c}")))
            .collect(),
        DatasetKind::Custom => (0..custom_count).map(|i| format!("img{i:03}")).collect(),
    }
}

/// Writes a complete dataset root (`images/`, `masks/`, `roi/`) of synthetic
/// `h x w` PNG images.
pub fn write_synthetic_dataset(root: &Path, kind: DatasetKind, h: usize, w: usize, seed: u64) -> Result<()> {
    let stems = dataset_stems(kind, 4);
    for dir in ["images", "masks", "roi"] {
        fs::create_dir_all(root.join(dir))?;
    }
    for stem in stems {
        let s = synthetic_fundus(&stem, h, w, seed);
        write_rgb_png(&root.join("images").join(format!("{stem}.png")), &s.image)?;
        write_mask_png(&root.join("masks").join(format!("{stem}.png")), &s.mask)?;
        write_mask_png(
            &root.join("roi").join(format!("{stem}.png")),
            s.roi.as_ref().expect("roi"),
        )?;
    }
    Ok(())
}
