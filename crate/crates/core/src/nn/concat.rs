use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Depth-wise concatenation; channel order follows input order.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid(OP, "at least one input is required"))?;
    let (n, _, h, w) = first.dims4(OP)?;
    let mut channels = 0;
    for (i, t) in inputs.iter().enumerate() {
        let (tn, tc, th, tw) = t.dims4(OP)?;
        for (dim, e, f) in [("batch", n, tn), ("height", h, th), ("width", w, tw)] {
            if e != f {
                return Err(Error::shape(OP, format!("{dim} of input {i}"), e, f));
            }
        }
        channels += tc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * channels * plane);
    for i in 0..n {
        for t in inputs {
            let block = t.shape()[1] * plane;
            data.extend_from_slice(&t.data()[i * block..(i + 1) * block]);
        }
    }
    Tensor::from_vec(&[n, channels, h, w], data)
}

/// Slices `dy` back into per-input gradients with the given channel counts.
pub fn concat_channels_backward<T: Scalar>(dy: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    const OP: &str = "concat_channels_backward";
    let (n, c, h, w) = dy.dims4(OP)?;
    let total: usize = channels.iter().sum();
    if total != c {
        return Err(Error::shape(OP, "channels", total, c));
    }
    let plane = h * w;
    let mut outs: Vec<Vec<T>> = channels.iter().map(|&k| Vec::with_capacity(n * k * plane)).collect();
    let src = dy.data();
    for i in 0..n {
        let mut offset = i * c * plane;
        for (out, &k) in outs.iter_mut().zip(channels) {
            out.extend_from_slice(&src[offset..offset + k * plane]);
            offset += k * plane;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(data, &k)| Tensor::from_vec(&[n, k, h, w], data))
        .collect()
}
