use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const PROB_FLOOR: f64 = 1e-12;

/// Mean two-class negative log-likelihood over the pixels selected by
/// `weight_mask` (all pixels when absent).
///
/// `probs` is the softmax output (`n x classes x h x w`); `target` holds class
/// indices with shape `n x h x w`. Returns the loss and its gradient with
/// respect to the logits that produced `probs`, `(probs - one_hot) / N`.
pub fn cross_entropy_loss<T: Scalar>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    weight_mask: Option<&Tensor<T>>,
) -> Result<(T, Tensor<T>)> {
    const OP: &str = "cross_entropy_loss";
    let (n, c, h, w) = probs.dims4(OP)?;
    target.expect_shape(OP, &[n, h, w])?;
    if let Some(m) = weight_mask {
        m.expect_shape(OP, &[n, h, w])?;
    }
    let plane = h * w;
    let selected = |i: usize| weight_mask.is_none_or(|m| m.data()[i] > T::zero());
    let count = (0..n * plane).filter(|&i| selected(i)).count();
    let mut grad = Tensor::zeros(probs.shape());
    if count == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::from_usize(count).expect("count fits");
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let (ps, ts) = (probs.data(), target.data());
    let mut total = 0.0f64;
    for i in 0..n {
        for p in 0..plane {
            let flat = i * plane + p;
            if !selected(flat) {
                continue;
            }
            let class = ts[flat].to_usize().filter(|&k| k < c).ok_or_else(|| {
                Error::invalid(
                    OP,
                    format!("target value {:?} is not a class index below {c}", ts[flat]),
                )
            })?;
            for ch in 0..c {
                let at = (i * c + ch) * plane + p;
                let hot = if ch == class { T::one() } else { T::zero() };
                grad.data_mut()[at] = (ps[at] - hot) * inv;
            }
            let q = ps[(i * c + class) * plane + p];
            // `max` would turn NaN into the floor and hide it.
            total -= if q.is_nan() {
                f64::NAN
            } else {
                q.max(floor).ln().as_f64()
            };
        }
    }
    Ok((T::from_f64_lossy(total / count as f64), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        let probs = Tensor::<f64>::from_vec(&[1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let target = Tensor::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let (loss, _) = cross_entropy_loss(&probs, &target, None).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn nan_probabilities_give_nan_loss() {
        let probs = Tensor::<f32>::full(&[1, 2, 1, 1], f32::NAN);
        let target = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        assert!(cross_entropy_loss(&probs, &target, None).unwrap().0.is_nan());
    }

    #[test]
    fn uniform_prediction_costs_ln2() {
        let probs = Tensor::<f64>::full(&[2, 2, 3, 3], 0.5);
        let target = Tensor::from_vec(&[2, 3, 3], (0..18).map(|i| (i % 2) as f64).collect()).unwrap();
        let (loss, _) = cross_entropy_loss(&probs, &target, None).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_floored() {
        let probs = Tensor::<f32>::from_vec(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let target = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let (loss, _) = cross_entropy_loss(&probs, &target, None).unwrap();
        assert!(loss.is_finite());
        assert!((loss as f64 - 1e12f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn masked_pixels_are_ignored() {
        let probs = Tensor::<f64>::from_vec(&[1, 2, 1, 2], vec![0.5, 0.9, 0.5, 0.1]).unwrap();
        let target = Tensor::from_vec(&[1, 1, 2], vec![0.0, 0.0]).unwrap();
        let mask = Tensor::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let (loss, grad) = cross_entropy_loss(&probs, &target, Some(&mask)).unwrap();
        assert!((loss + 0.9f64.ln()).abs() < 1e-12);
        assert_eq!(grad.data()[0], 0.0);
        assert_eq!(grad.data()[2], 0.0);
    }

    #[test]
    fn invalid_class_is_rejected() {
        let probs = Tensor::<f64>::full(&[1, 2, 1, 1], 0.5);
        let target = Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        assert!(cross_entropy_loss(&probs, &target, None).is_err());
    }
}
