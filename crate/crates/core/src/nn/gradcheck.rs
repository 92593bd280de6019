//! Central finite-difference verification of backward passes.
//!
//! A layer is reduced to the scalar `L = sum(r * layer(x))` for a fixed random
//! projection `r`. The analytic gradient comes from `backward(r)`; the numeric
//! one from `(L(x + e) - L(x - e)) / 2e` on sampled coordinates of the input
//! and of every parameter.

use rand::Rng;

use super::{Layer, Mode};
use crate::error::Result;
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub epsilon: f64,
    /// Coordinates checked per tensor (all coordinates if the tensor is smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            epsilon: 1e-5,
            samples_per_tensor: 24,
            seed: 0,
            mode: Mode::Train,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst coordinate.
    pub worst: String,
    pub checked: usize,
    /// Checked coordinates whose gradient was zero to rounding on both sides.
    pub zero_gradient: usize,
    /// Coordinates whose stencil straddled a kink and needed a smaller step.
    pub refined: usize,
    /// Largest plain relative error, before discounting rounding, over
    /// coordinates not flagged as zero gradient.
    pub max_raw_error: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Rounding bound of a central difference of a sum whose terms have total
/// magnitude `magnitude`.
pub fn difference_noise(magnitude: f64, epsilon: f64) -> f64 {
    64.0 * f64::EPSILON * magnitude.max(1.0) / epsilon
}

/// Relative error after discounting the rounding bound `noise` of the
/// numeric estimate: `max(|a - n| - noise, 0) / max(|a|, |n|, 1e-8)`. The
/// numeric gradient is only known to within `noise`, so a discrepancy that
/// small says nothing about the analytic one. A coordinate where both
/// gradients lie within the noise (a bias feeding batch norm, for one) counts
/// as agreeing exactly and is flagged.
fn coordinate_error(analytic: f64, numeric: f64, noise: f64) -> (f64, bool) {
    if analytic.abs() <= noise && numeric.abs() <= noise {
        return (0.0, true);
    }
    let excess = ((analytic - numeric).abs() - noise).max(0.0);
    (excess / analytic.abs().max(numeric.abs()).max(1e-8), false)
}

/// Relative disagreement between the estimates at `h` and `h / 2` that a
/// smooth function cannot produce (its truncation error is `O(h^2)`).
const SMOOTHNESS: f64 = 1e-6;
/// Each refinement divides the step by ten.
const MAX_REFINEMENTS: usize = 3;

/// Central difference of `eval` (the scalar at a signed offset of one
/// coordinate) around zero. A ReLU kink inside the stencil makes the
/// estimates at `h` and `h / 2` disagree; the step then shrinks until they
/// agree. Only the function is consulted, never the analytic gradient.
/// Returns the estimate and the step it was taken at.
fn numeric_derivative(mut eval: impl FnMut(f64) -> Result<f64>, epsilon: f64, magnitude: f64) -> Result<(f64, f64)> {
    let mut central = |h: f64| -> Result<f64> { Ok((eval(h)? - eval(-h)?) / (2.0 * h)) };
    let mut h = epsilon;
    let mut coarse = central(h)?;
    for refinement in 0..=MAX_REFINEMENTS {
        let fine = central(h / 2.0)?;
        let tol = SMOOTHNESS * coarse.abs().max(fine.abs()) + 2.0 * difference_noise(magnitude, h / 2.0);
        if (coarse - fine).abs() <= tol || refinement == MAX_REFINEMENTS {
            return Ok((coarse, h));
        }
        h /= 10.0;
        coarse = central(h)?;
    }
    unreachable!("the last refinement returns")
}

fn sample_indices<R: Rng>(len: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if len <= k {
        (0..len).collect()
    } else {
        (0..k).map(|_| rng.random_range(0..len)).collect()
    }
}

fn projected_magnitude<L: Layer<f64> + ?Sized>(
    layer: &mut L,
    x: &Tensor<f64>,
    r: &Tensor<f64>,
    mode: Mode,
) -> Result<f64> {
    let y = layer.forward(x, mode)?;
    Ok(y.data().iter().zip(r.data()).map(|(a, b)| (a * b).abs()).sum())
}

fn projected_loss<L: Layer<f64> + ?Sized>(layer: &mut L, x: &Tensor<f64>, r: &Tensor<f64>, mode: Mode) -> Result<f64> {
    let y = layer.forward(x, mode)?;
    Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

/// Maximum relative error between analytic and numeric gradients of `layer`
/// at `input`, over sampled coordinates of the input and all parameters.
pub fn gradcheck<L: Layer<f64> + ?Sized>(
    layer: &mut L,
    input: &Tensor<f64>,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let mut rng = seeded(cfg.seed);
    let y = layer.forward(input, cfg.mode)?;
    let r = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);

    layer.zero_grad();
    layer.forward(input, cfg.mode)?;
    let dx = layer.backward(&r)?;
    let param_grads: Vec<(String, Tensor<f64>)> = layer
        .params()
        .into_iter()
        .map(|(name, p)| (name, p.grad.clone()))
        .collect();

    let eps = cfg.epsilon;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        zero_gradient: 0,
        refined: 0,
        max_raw_error: 0.0,
    };
    let magnitude = projected_magnitude(layer, input, &r, cfg.mode)?;
    let mut record = |name: &str, idx: usize, analytic: f64, (numeric, step): (f64, f64)| {
        let (err, zero) = coordinate_error(analytic, numeric, difference_noise(magnitude, step));
        report.checked += 1;
        report.zero_gradient += usize::from(zero);
        report.refined += usize::from(step < eps);
        if !zero {
            report.max_raw_error = report.max_raw_error.max(relative_error(analytic, numeric));
        }
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = format!("{name}[{idx}]");
        }
    };

    let mut x = input.clone();
    for idx in sample_indices(x.len(), cfg.samples_per_tensor, &mut rng) {
        let orig = x.data()[idx];
        let numeric = numeric_derivative(
            |d| {
                x.data_mut()[idx] = orig + d;
                projected_loss(layer, &x, &r, cfg.mode)
            },
            eps,
            magnitude,
        )?;
        x.data_mut()[idx] = orig;
        record("input", idx, dx.data()[idx], numeric);
    }

    for (pi, (name, grad)) in param_grads.iter().enumerate() {
        let len = grad.len();
        for idx in sample_indices(len, cfg.samples_per_tensor, &mut rng) {
            let orig = layer.params()[pi].1.value.data()[idx];
            let numeric = numeric_derivative(
                |d| {
                    set_param(layer, pi, idx, orig + d);
                    projected_loss(layer, input, &r, cfg.mode)
                },
                eps,
                magnitude,
            )?;
            set_param(layer, pi, idx, orig);
            record(name, idx, grad.data()[idx], numeric);
        }
    }
    Ok(report)
}

fn set_param<L: Layer<f64> + ?Sized>(layer: &mut L, param: usize, idx: usize, value: f64) {
    let mut params = layer.params_mut();
    params[param].1.value.data_mut()[idx] = value;
}

/// Numeric gradient of a scalar function at sampled coordinates of `x`,
/// compared against `analytic`. Used for losses that are not layers.
pub fn gradcheck_fn(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let mut rng = seeded(cfg.seed);
    let mut x = x.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        zero_gradient: 0,
        refined: 0,
        max_raw_error: 0.0,
    };
    let magnitude = f(&x)?.abs();
    for idx in sample_indices(x.len(), cfg.samples_per_tensor, &mut rng) {
        let orig = x.data()[idx];
        let (numeric, step) = numeric_derivative(
            |d| {
                x.data_mut()[idx] = orig + d;
                f(&x)
            },
            cfg.epsilon,
            magnitude,
        )?;
        x.data_mut()[idx] = orig;
        let a = analytic.data()[idx];
        let (err, zero) = coordinate_error(a, numeric, difference_noise(magnitude, step));
        report.checked += 1;
        report.zero_gradient += usize::from(zero);
        report.refined += usize::from(step < cfg.epsilon);
        if !zero {
            report.max_raw_error = report.max_raw_error.max(relative_error(a, numeric));
        }
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = format!("input[{idx}]");
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, ConvSpec, NamedParams, NamedParamsMut};

    #[test]
    fn kink_inside_the_stencil_shrinks_the_step() {
        // Slope 2 at the origin; the kink 4e-6 to the right sits inside the
        // default stencil and would bias the estimate to 2.3.
        let f = |t: &Tensor<f64>| -> Result<f64> { Ok(t.data().iter().map(|&v| 2.0 * v + (v - 4e-6).max(0.0)).sum()) };
        let x = Tensor::zeros(&[1]);
        let analytic = Tensor::full(&[1], 2.0);
        let rep = gradcheck_fn(f, &x, &analytic, &GradcheckConfig::default()).unwrap();
        assert_eq!(rep.refined, 1);
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
    }

    #[test]
    fn linear_layer_is_exact_to_rounding() {
        let mut rng = seeded(1);
        let mut conv = Conv2d::<f64>::new(ConvSpec::same(3, 4, 1), &mut rng).unwrap();
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let rep = gradcheck(&mut conv, &x, &GradcheckConfig::default()).unwrap();
        assert!(rep.max_rel_error < 1e-7, "{rep:?}");
        assert!(rep.checked > 24);
    }

    struct Corrupted(Conv2d<f64>);

    impl Layer<f64> for Corrupted {
        fn forward(&mut self, x: &Tensor<f64>, mode: Mode) -> Result<Tensor<f64>> {
            self.0.forward(x, mode)
        }
        fn backward(&mut self, dy: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(self.0.backward(dy)?.map(|v| v * 1.01))
        }
        fn params(&self) -> NamedParams<'_, f64> {
            self.0.params()
        }
        fn params_mut(&mut self) -> NamedParamsMut<'_, f64> {
            self.0.params_mut()
        }
    }

    #[test]
    fn detects_a_one_percent_scaling_fault() {
        let mut rng = seeded(2);
        let mut bad = Corrupted(Conv2d::new(ConvSpec::same(2, 2, 3), &mut rng).unwrap());
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        let rep = gradcheck(&mut bad, &x, &GradcheckConfig::default()).unwrap();
        assert!(rep.max_rel_error > 1e-3, "{rep:?}");
        assert!(rep.worst.starts_with("input"));
    }
}
