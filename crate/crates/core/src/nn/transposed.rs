use rand::Rng;
use rayon::prelude::*;

use super::conv::{col2im, im2col, ConvGrads, ConvSpec};
use super::{he_std, Layer, Mode, NamedParams, NamedParamsMut, Param};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of the strided convolution whose input-gradient a transposed
/// convolution computes. Weights are laid out `in x out x k x k`.
fn adjoint_spec(w: &[usize], stride: usize) -> ConvSpec {
    ConvSpec {
        kernel_h: w[2],
        kernel_w: w[3],
        stride,
        dilation: 1,
        padding: 0,
        in_channels: w[1],
        out_channels: w[0],
        depthwise: false,
    }
}

fn check<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, ConvSpec)> {
    if stride < 1 {
        return Err(Error::invalid(op, "stride must be >= 1"));
    }
    let (n, c, h, wd) = x.dims4(op)?;
    let (wc, _, _, _) = w.dims4(op)?;
    if wc != c {
        return Err(Error::shape(op, "weight in_channels", c, wc));
    }
    let spec = adjoint_spec(w.shape(), stride);
    let oh = (h - 1) * stride + spec.kernel_h;
    let ow = (wd - 1) * stride + spec.kernel_w;
    Ok((n, c, h, wd, oh, ow, spec))
}

/// Learnable upsampling, unpadded. With kernel equal to stride the output
/// extent is exactly `input * stride`.
pub fn transposed_conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    const OP: &str = "transposed_conv2d";
    let (n, c, h, wd, oh, ow, spec) = check(OP, x, w, stride)?;
    let co = spec.in_channels;
    if b.shape() != [co] {
        return Err(Error::shape(OP, "bias length", co, b.len()));
    }
    let k = co * spec.kernel_h * spec.kernel_w;
    let plane = h * wd;
    let in_len = c * plane;
    let out_len = co * oh * ow;
    let (xs, ws, bs) = (x.data(), w.data(), b.data());

    let mut y = Tensor::zeros(&[n, co, oh, ow]);
    y.data_mut().par_chunks_mut(out_len).enumerate().for_each(|(i, out)| {
        let xi = &xs[i * in_len..(i + 1) * in_len];
        let mut cols = vec![T::zero(); k * plane];
        // cols = W^T x, with W viewed as c x k
        T::gemm(
            k,
            c,
            plane,
            T::one(),
            ws,
            (1, k as isize),
            xi,
            (plane as isize, 1),
            T::zero(),
            &mut cols,
            (plane as isize, 1),
        );
        for (o, chunk) in out.chunks_mut(oh * ow).enumerate() {
            chunk.fill(bs[o]);
        }
        col2im(&cols, (co, oh, ow), &spec, (h, wd), out);
    });
    Ok(y)
}

pub fn transposed_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    const OP: &str = "transposed_conv2d_backward";
    let (n, c, h, wd, oh, ow, spec) = check(OP, x, w, stride)?;
    let co = spec.in_channels;
    dy.expect_shape(OP, &[n, co, oh, ow])?;
    let k = co * spec.kernel_h * spec.kernel_w;
    let plane = h * wd;
    let in_len = c * plane;
    let out_len = co * oh * ow;
    let (xs, ws, dys) = (x.data(), w.data(), dy.data());

    let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &xs[i * in_len..(i + 1) * in_len];
            let dyi = &dys[i * out_len..(i + 1) * out_len];
            let mut cols = vec![T::zero(); k * plane];
            im2col(dyi, (co, oh, ow), &spec, (h, wd), &mut cols);
            let mut dx = vec![T::zero(); in_len];
            T::gemm(
                c,
                k,
                plane,
                T::one(),
                ws,
                (k as isize, 1),
                &cols,
                (plane as isize, 1),
                T::zero(),
                &mut dx,
                (plane as isize, 1),
            );
            let mut dw = vec![T::zero(); c * k];
            T::gemm(
                c,
                plane,
                k,
                T::one(),
                xi,
                (plane as isize, 1),
                &cols,
                (1, plane as isize),
                T::zero(),
                &mut dw,
                (k as isize, 1),
            );
            let db = dyi.chunks(oh * ow).map(|p| p.iter().copied().sum()).collect();
            (dx, dw, db)
        })
        .collect();

    let mut dx = Vec::with_capacity(n * in_len);
    let mut dw = vec![T::zero(); w.len()];
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

/// Transposed convolution layer (kernel = stride in the reference network).
#[derive(Clone, Debug)]
pub struct TransposedConv2d<T> {
    pub stride: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> TransposedConv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if stride < 1 || kernel < 1 || in_channels < 1 || out_channels < 1 {
            return Err(Error::invalid(
                "transposed_conv2d",
                "kernel, stride and channels must be >= 1",
            ));
        }
        // Each output pixel receives in_channels * (kernel/stride)^2 taps.
        let taps = (kernel / stride).max(1).pow(2);
        let weight = Tensor::randn(
            &[in_channels, out_channels, kernel, kernel],
            he_std(in_channels * taps),
            rng,
        );
        Ok(TransposedConv2d {
            stride,
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            input: None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }
}

impl<T: Scalar> Layer<T> for TransposedConv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = transposed_conv2d(x, &self.weight.value, &self.bias.value, self.stride)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::invalid("transposed_conv2d_backward", "backward called before forward"))?;
        let g = transposed_conv2d_backward(x, &self.weight.value, self.stride, dy)?;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn single_pixel_expands_to_scaled_kernel() {
        let mut rng = seeded(9);
        let k = Tensor::<f64>::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![2.5]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.25]).unwrap();
        let y = transposed_conv2d(&x, &k, &b, 4).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        for (out, kv) in y.data().iter().zip(k.data()) {
            assert_eq!(*out, 2.5 * kv + 0.25);
        }
    }

    #[test]
    fn stride_four_quadruples_extent() {
        let mut rng = seeded(2);
        let x = Tensor::<f32>::randn(&[1, 3, 2, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 5, 4, 4], 1.0, &mut rng);
        let y = transposed_conv2d(&x, &w, &Tensor::zeros(&[5]), 4).unwrap();
        assert_eq!(y.shape(), &[1, 5, 8, 8]);
    }

    #[test]
    fn zero_stride_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(transposed_conv2d(&x, &w, &Tensor::zeros(&[1]), 0).is_err());
        assert!(TransposedConv2d::<f32>::new(1, 1, 4, 0, &mut seeded(0)).is_err());
    }
}
