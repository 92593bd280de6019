use super::Param;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }
}

/// One bias-corrected ADAM update of `param` in place.
///
/// A non-finite gradient leaves both `param` and `state` untouched.
pub fn adam_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    grad.expect_shape("adam_step", param.shape())?;
    state.m.expect_shape("adam_step", param.shape())?;
    state.v.expect_shape("adam_step", param.shape())?;
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient {
            name: "<tensor>".into(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64_lossy(state.beta1), T::from_f64_lossy(state.beta2));
    let c1 = T::from_f64_lossy(1.0 - state.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - state.beta2.powi(t));
    let lr = T::from_f64_lossy(lr);
    let eps = T::from_f64_lossy(state.epsilon);
    let ms = state.m.data_mut();
    let vs = state.v.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(ms).zip(vs) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// ADAM over an ordered list of named parameters.
#[derive(Clone, Debug, Default)]
pub struct Adam<T> {
    pub states: Vec<(String, AdamState<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Adam { states: Vec::new() }
    }

    /// Updates every parameter, or none if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [(String, &mut Param<T>)], lr: f64) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
        if self.states.is_empty() {
            self.states = params
                .iter()
                .map(|(name, p)| (name.clone(), AdamState::new(p.value.shape())))
                .collect();
        }
        if self.states.len() != params.len() {
            return Err(Error::shape("adam", "parameter count", self.states.len(), params.len()));
        }
        for ((name, p), (state_name, state)) in params.iter_mut().zip(&mut self.states) {
            if name != state_name {
                return Err(Error::invalid(
                    "adam",
                    format!("parameter order changed: `{name}` vs `{state_name}`"),
                ));
            }
            adam_step(&mut p.value, &p.grad, state, lr)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[3]);
        adam_step(&mut p, &Tensor::zeros(&[3]), &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let lr = 1e-3;
        let mut p = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::from_vec(&[2], vec![0.37, -42.0]).unwrap();
        let mut st = AdamState::new(&[2]);
        adam_step(&mut p, &g, &mut st, lr).unwrap();
        assert!((p.data()[0] + lr).abs() < 1e-10);
        assert!((p.data()[1] - lr).abs() < 1e-10);
    }

    #[test]
    fn scripted_recurrence_three_steps() {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.01f64);
        let grads = [0.5, -1.25, 2.0];
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }

        let mut p = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap();
        let mut st = AdamState::new(&[1]);
        for g in grads {
            adam_step(&mut p, &Tensor::from_vec(&[1], vec![g]).unwrap(), &mut st, lr).unwrap();
        }
        assert!((p.data()[0] - x).abs() < 1e-10);
        assert_eq!(st.t, 3);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut p = Tensor::<f32>::ones(&[2]);
        let mut st = AdamState::new(&[2]);
        let g = Tensor::from_vec(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, 0.1),
            Err(Error::NonFiniteGradient { .. })
        ));
        assert_eq!(p, Tensor::ones(&[2]));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn optimizer_names_the_offending_parameter() {
        let mut a = Param::new(Tensor::<f32>::ones(&[1]));
        let mut b = Param::new(Tensor::<f32>::ones(&[1]));
        b.grad.data_mut()[0] = f32::INFINITY;
        a.grad.data_mut()[0] = 1.0;
        let mut opt = Adam::new();
        let mut params = vec![("a".to_string(), &mut a), ("b".to_string(), &mut b)];
        let err = opt.step(&mut params, 0.1).unwrap_err();
        assert!(err.to_string().contains("`b`"));
        assert_eq!(a.value.data()[0], 1.0);
    }
}
