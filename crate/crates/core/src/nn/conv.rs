use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{he_std, Layer, Mode, NamedParams, NamedParamsMut, Param};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// One filter per input channel; requires `out_channels == in_channels`.
    pub depthwise: bool,
}

impl ConvSpec {
    /// Square-kernel, stride-1, "same"-padded convolution.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            dilation: 1,
            padding: kernel / 2,
            in_channels,
            out_channels,
            depthwise: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec {
            depthwise: true,
            ..ConvSpec::same(channels, channels, kernel)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
            ("dilation", self.dilation),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid("conv2d", format!("{name} must be >= 1")));
        }
        if self.depthwise && self.in_channels != self.out_channels {
            return Err(Error::shape(
                "conv2d",
                "out_channels (depthwise)",
                self.in_channels,
                self.out_channels,
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let per_filter = if self.depthwise { 1 } else { self.in_channels };
        [self.out_channels, per_filter, self.kernel_h, self.kernel_w]
    }

    pub fn fan_in(&self) -> usize {
        self.weight_shape()[1..].iter().product()
    }

    /// Trainable scalars: weights plus one bias per output channel.
    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_channels
    }

    /// `floor((extent + 2p - d(k-1) - 1) / s) + 1` for both axes.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |extent: usize, k: usize, name: &str| -> Result<usize> {
            let span = self.dilation * (k - 1) + 1;
            let padded = extent + 2 * self.padding;
            if padded < span {
                return Err(Error::invalid(
                    "conv2d",
                    format!(
                        "{name} {extent} (+2x{} padding) is smaller than the dilated kernel span {span}",
                        self.padding
                    ),
                ));
            }
            Ok((padded - span) / self.stride + 1)
        };
        Ok((axis(h, self.kernel_h, "height")?, axis(w, self.kernel_w, "width")?))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Gradients returned by a convolution backward pass.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

fn check_operands<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    spec.validate()?;
    let (n, c, h, wd) = x.dims4(op)?;
    if c != spec.in_channels {
        return Err(Error::shape(op, "input channels", spec.in_channels, c));
    }
    w.expect_shape(op, &spec.weight_shape())
        .map_err(|e| rename_weight_error(e, op))?;
    if let Some(b) = b {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape(op, "bias length", spec.out_channels, b.len()));
        }
    }
    let (oh, ow) = spec.output_hw(h, wd)?;
    Ok((n, c, h, wd, oh, ow))
}

fn rename_weight_error(e: Error, op: &'static str) -> Error {
    match e {
        Error::Shape {
            dim, expected, found, ..
        } => Error::Shape {
            op,
            dim: format!("weight {}", weight_axis_name(&dim)),
            expected,
            found,
        },
        other => other,
    }
}

fn weight_axis_name(dim: &str) -> &str {
    match dim {
        "batch" => "out_channels",
        "channels" => "in_channels per filter",
        "height" => "kernel_h",
        "width" => "kernel_w",
        other => other,
    }
}

/// Unfolds one `c x h x w` image into a `(c*kh*kw) x (oh*ow)` patch matrix.
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    spec: &ConvSpec,
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (s, d, p) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let plane = oh * ow;
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * plane;
                let out = &mut cols[row..row + plane];
                for oy in 0..oh {
                    let iy = oy as isize * s + ki as isize * d - p;
                    let dst = &mut out[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize * d - p;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto an image, accumulating.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    spec: &ConvSpec,
    (oh, ow): (usize, usize),
    x: &mut [T],
) {
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (s, d, p) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let plane = oh * ow;
    for ch in 0..c {
        let xc = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * plane;
                let src = &cols[row..row + plane];
                for oy in 0..oh {
                    let iy = oy as isize * s + ki as isize * d - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize * s + kj as isize * d - p;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `x` (`n x c x h x w`) with `w`, plus bias.
///
/// Dense filters have shape `out x in x kh x kw`; depthwise filters
/// `channels x 1 x kh x kw`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let (n, c, h, wd, oh, ow) = check_operands("conv2d", x, w, Some(b), spec)?;
    let co = spec.out_channels;
    let mut y = Tensor::zeros(&[n, co, oh, ow]);
    let in_len = c * h * wd;
    let out_len = co * oh * ow;
    let xs = x.data();
    let (ws, bs) = (w.data(), b.data());

    y.data_mut().par_chunks_mut(out_len).enumerate().for_each(|(i, out)| {
        let xi = &xs[i * in_len..(i + 1) * in_len];
        if spec.depthwise {
            depthwise_forward(xi, (c, h, wd), ws, bs, spec, (oh, ow), out);
            return;
        }
        let k = c * spec.kernel_h * spec.kernel_w;
        let plane = oh * ow;
        for (o, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(bs[o]);
        }
        if spec.is_pointwise() {
            T::gemm(
                co,
                k,
                plane,
                T::one(),
                ws,
                (k as isize, 1),
                xi,
                (plane as isize, 1),
                T::one(),
                out,
                (plane as isize, 1),
            );
        } else {
            let mut cols = vec![T::zero(); k * plane];
            im2col(xi, (c, h, wd), spec, (oh, ow), &mut cols);
            T::gemm(
                co,
                k,
                plane,
                T::one(),
                ws,
                (k as isize, 1),
                &cols,
                (plane as isize, 1),
                T::one(),
                out,
                (plane as isize, 1),
            );
        }
    });
    Ok(y)
}

/// Gradients of [`conv2d`] given the upstream gradient `dy`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (n, c, h, wd, oh, ow) = check_operands("conv2d_backward", x, w, None, spec)?;
    let co = spec.out_channels;
    dy.expect_shape("conv2d_backward", &[n, co, oh, ow])?;
    let in_len = c * h * wd;
    let out_len = co * oh * ow;
    let plane = oh * ow;
    let (xs, ws, dys) = (x.data(), w.data(), dy.data());
    let w_len = w.len();

    // Per-sample partials are reduced in sample order below, so the result
    // does not depend on how rayon schedules the samples.
    let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &xs[i * in_len..(i + 1) * in_len];
            let dyi = &dys[i * out_len..(i + 1) * out_len];
            let mut dx = vec![T::zero(); in_len];
            let mut dw = vec![T::zero(); w_len];
            let db: Vec<T> = dyi.chunks(plane).map(|p| p.iter().copied().sum()).collect();
            if spec.depthwise {
                depthwise_backward(xi, (c, h, wd), ws, spec, (oh, ow), dyi, &mut dx, &mut dw);
                return (dx, dw, db);
            }
            let k = c * spec.kernel_h * spec.kernel_w;
            if spec.is_pointwise() {
                T::gemm(
                    co,
                    plane,
                    k,
                    T::one(),
                    dyi,
                    (plane as isize, 1),
                    xi,
                    (1, plane as isize),
                    T::zero(),
                    &mut dw,
                    (k as isize, 1),
                );
                T::gemm(
                    k,
                    co,
                    plane,
                    T::one(),
                    ws,
                    (1, k as isize),
                    dyi,
                    (plane as isize, 1),
                    T::zero(),
                    &mut dx,
                    (plane as isize, 1),
                );
            } else {
                let mut cols = vec![T::zero(); k * plane];
                im2col(xi, (c, h, wd), spec, (oh, ow), &mut cols);
                T::gemm(
                    co,
                    plane,
                    k,
                    T::one(),
                    dyi,
                    (plane as isize, 1),
                    &cols,
                    (1, plane as isize),
                    T::zero(),
                    &mut dw,
                    (k as isize, 1),
                );
                T::gemm(
                    k,
                    co,
                    plane,
                    T::one(),
                    ws,
                    (1, k as isize),
                    dyi,
                    (plane as isize, 1),
                    T::zero(),
                    &mut cols,
                    (plane as isize, 1),
                );
                col2im(&cols, (c, h, wd), spec, (oh, ow), &mut dx);
            }
            (dx, dw, db)
        })
        .collect();

    let mut dx = Vec::with_capacity(n * in_len);
    let mut dw = vec![T::zero(); w_len];
    let mut db = vec![T::zero(); co];
    for (pdx, pdw, pdb) in partials {
        dx.extend_from_slice(&pdx);
        dw.iter_mut().zip(&pdw).for_each(|(a, &g)| *a += g);
        db.iter_mut().zip(&pdb).for_each(|(a, &g)| *a += g);
    }
    Ok(ConvGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dw: Tensor::from_vec(w.shape(), dw)?,
        db: Tensor::from_vec(&[co], db)?,
    })
}

/// Output columns `lo..hi` whose tap at input offset `ox * s + off` lands
/// inside `0..w`.
fn valid_columns(off: isize, s: isize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let hi = if (w as isize) <= off {
        0
    } else {
        ((w as isize - off + s - 1) / s) as usize
    };
    (lo.min(ow), hi.min(ow))
}

// Both depthwise kernels walk one kernel tap at a time over a whole output
// row, so the innermost loop is branch-free and contiguous for stride 1.
fn depthwise_forward<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    weights: &[T],
    bias: &[T],
    spec: &ConvSpec,
    (oh, ow): (usize, usize),
    out: &mut [T],
) {
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (s, d, p) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let wc = &weights[ch * kh * kw..(ch + 1) * kh * kw];
        let yc = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        yc.fill(bias[ch]);
        for oy in 0..oh {
            let yrow = &mut yc[oy * ow..(oy + 1) * ow];
            for ki in 0..kh {
                let iy = oy as isize * s + ki as isize * d - p;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                for kj in 0..kw {
                    let wv = wc[ki * kw + kj];
                    let off = kj as isize * d - p;
                    let (lo, hi) = valid_columns(off, s, w, ow);
                    for (ox, y) in yrow.iter_mut().enumerate().take(hi).skip(lo) {
                        *y += wv * xrow[(ox as isize * s + off) as usize];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    weights: &[T],
    spec: &ConvSpec,
    (oh, ow): (usize, usize),
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
) {
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (s, d, p) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let wc = &weights[ch * kh * kw..(ch + 1) * kh * kw];
        let dyc = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let dxc = &mut dx[ch * h * w..(ch + 1) * h * w];
        let dwc = &mut dw[ch * kh * kw..(ch + 1) * kh * kw];
        for oy in 0..oh {
            let grow = &dyc[oy * ow..(oy + 1) * ow];
            for ki in 0..kh {
                let iy = oy as isize * s + ki as isize * d - p;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let row = iy as usize * w;
                for kj in 0..kw {
                    let wv = wc[ki * kw + kj];
                    let off = kj as isize * d - p;
                    let (lo, hi) = valid_columns(off, s, w, ow);
                    let mut acc = T::zero();
                    for (ox, &g) in grow.iter().enumerate().take(hi).skip(lo) {
                        let at = row + (ox as isize * s + off) as usize;
                        dxc[at] += g * wv;
                        acc += g * xc[at];
                    }
                    dwc[ki * kw + kj] += acc;
                }
            }
        }
    }
}

/// Convolution layer owning its weights and bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-initialized weights, zero bias.
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let weight = Tensor::randn(&spec.weight_shape(), he_std(spec.fan_in()), rng);
        Ok(Conv2d {
            spec,
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[spec.out_channels])),
            input: None,
        })
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.weight.value, &self.bias.value, &self.spec)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::invalid("conv2d_backward", "backward called before forward"))?;
        let g = conv2d_backward(x, &self.weight.value, &self.spec, dy)?;
        self.weight.grad.add_assign(&g.dw)?;
        self.bias.grad.add_assign(&g.db)?;
        Ok(g.dx)
    }

    fn params(&self) -> NamedParams<'_, T> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}
