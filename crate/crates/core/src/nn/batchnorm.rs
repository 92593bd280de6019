use super::{Layer, Mode, NamedBuffers, NamedBuffersMut, NamedParams, NamedParamsMut, Param};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running value: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel running mean and (biased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

/// What the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mode: Mode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4("batchnorm")?;
    for (name, t) in [("gamma length", gamma), ("beta length", beta)] {
        if t.shape() != [c] {
            return Err(Error::shape("batchnorm", name, c, t.len()));
        }
    }
    Ok((n, c, h * w))
}

/// Per-channel normalization followed by the affine `gamma * xhat + beta`.
///
/// Train mode normalizes with batch statistics and folds them into `stats`;
/// inference mode reads `stats`.
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: Mode,
    stats: &mut RunningStats<T>,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, plane) = check(x, gamma, beta)?;
    if stats.mean.shape() != [c] || stats.var.shape() != [c] {
        return Err(Error::shape("batchnorm", "running stats length", c, stats.mean.len()));
    }
    let eps = T::from_f64_lossy(BN_EPSILON);
    let count = n * plane;
    let xs = x.data();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); c];

    for ch in 0..c {
        let lanes = || (0..n).flat_map(move |i| (i * c + ch) * plane..(i * c + ch + 1) * plane);
        let (mean, var, constant) = match mode {
            Mode::Train => {
                // Statistics accumulate in f64 regardless of T.
                let first = xs[(ch) * plane];
                let mut sum = 0.0;
                let mut constant = true;
                for at in lanes() {
                    sum += xs[at].as_f64();
                    constant &= xs[at] == first;
                }
                let mean = sum / count as f64;
                let var = lanes().map(|at| (xs[at].as_f64() - mean).powi(2)).sum::<f64>() / count as f64;
                let m = T::from_f64_lossy(BN_MOMENTUM);
                let rm = &mut stats.mean.data_mut()[ch];
                *rm = m * *rm + (T::one() - m) * T::from_f64_lossy(mean);
                let rv = &mut stats.var.data_mut()[ch];
                *rv = m * *rv + (T::one() - m) * T::from_f64_lossy(var);
                (T::from_f64_lossy(mean), T::from_f64_lossy(var), constant)
            }
            Mode::Inference => (stats.mean.data()[ch], stats.var.data()[ch], false),
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for at in lanes() {
            // A constant channel normalizes to exactly zero even when the
            // rounded mean differs from the constant in the last bit.
            let xh = if constant { T::zero() } else { (xs[at] - mean) * istd };
            xhat.data_mut()[at] = xh;
            y.data_mut()[at] = g * xh + b;
        }
    }
    Ok((y, BnCache { mode, xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    dy.expect_shape("batchnorm_backward", cache.xhat.shape())?;
    let (n, c, h, w) = dy.dims4("batchnorm_backward")?;
    let plane = h * w;
    let count = T::from_usize(n * plane).expect("count fits");
    let (dys, xh) = (dy.data(), cache.xhat.data());
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);

    for ch in 0..c {
        let lanes = || (0..n).flat_map(move |i| (i * c + ch) * plane..(i * c + ch + 1) * plane);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for at in lanes() {
            sum_dy += dys[at];
            sum_dy_xhat += dys[at] * xh[at];
        }
        dgamma.data_mut()[ch] = sum_dy_xhat;
        dbeta.data_mut()[ch] = sum_dy;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        match cache.mode {
            Mode::Train => {
                let k = scale / count;
                for at in lanes() {
                    dx.data_mut()[at] = k * (count * dys[at] - sum_dy - xh[at] * sum_dy_xhat);
                }
            }
            Mode::Inference => {
                for at in lanes() {
                    dx.data_mut()[at] = scale * dys[at];
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Batch normalization over `(batch, height, width)` for each channel.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub stats: RunningStats<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::ones(&[channels])),
            beta: Param::new(Tensor::zeros(&[channels])),
            stats: RunningStats::new(channels),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, cache) = batchnorm(x, &self.gamma.value, &self.beta.value, mode, &mut self.stats)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::invalid("batchnorm_backward", "backward called before forward"))?;
        let (dx, dg, db) = batchnorm_backward(cache, &self.gamma.value, dy)?;
        self.gamma.grad.add_assign(&dg)?;
        self.beta.grad.add_assign(&db)?;
        Ok(dx)
    }

    fn params(&self) -> NamedParams<'_, T> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }

    fn buffers(&self) -> NamedBuffers<'_, T> {
        vec![
            ("running_mean".into(), &self.stats.mean),
            ("running_var".into(), &self.stats.var),
        ]
    }

    fn buffers_mut(&mut self) -> NamedBuffersMut<'_, T> {
        vec![
            ("running_mean".into(), &mut self.stats.mean),
            ("running_var".into(), &mut self.stats.var),
        ]
    }
}
