use super::{Layer, Mode, NamedParams, NamedParamsMut};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `dy` where `x > 0`; the subgradient at zero is zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.expect_shape("relu_backward", x.shape())?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Softmax across the channel axis of a 4-D tensor, per pixel.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("softmax_channels")?;
    let plane = h * w;
    let mut y = Tensor::zeros(x.shape());
    let (xs, ys) = (x.data(), y.data_mut());
    for i in 0..n {
        let base = i * c * plane;
        for p in 0..plane {
            let at = |ch: usize| base + ch * plane + p;
            let max = (0..c).map(|ch| xs[at(ch)]).fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for ch in 0..c {
                let e = (xs[at(ch)] - max).exp();
                ys[at(ch)] = e;
                denom += e;
            }
            for ch in 0..c {
                ys[at(ch)] /= denom;
            }
        }
    }
    Ok(y)
}

/// ReLU as a layer; caches its input for the backward mask.
#[derive(Clone, Debug, Default)]
pub struct Relu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.input = Some(x.clone());
        Ok(relu(x))
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::invalid("relu_backward", "backward called before forward"))?;
        relu_backward(x, dy)
    }

    fn params(&self) -> NamedParams<'_, T> {
        Vec::new()
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn relu_definition() {
        let x = Tensor::<f32>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let dx = relu_backward(&x, &Tensor::ones(&[3])).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_negative_input_blocks_everything() {
        let x = Tensor::<f64>::full(&[2, 2], -0.5);
        assert!(relu(&x).data().iter().all(|&v| v == 0.0));
        let dx = relu_backward(&x, &Tensor::full(&[2, 2], 3.0)).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        assert_eq!(softmax_channels(&x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let x = Tensor::<f32>::from_vec(&[1, 2, 1, 1], vec![1000.0, 0.0]).unwrap();
        let y = softmax_channels(&x).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!(y.data()[1] < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = seeded(11);
        let x = Tensor::<f32>::randn(&[2, 3, 4, 5], 5.0, &mut rng);
        let y = softmax_channels(&x).unwrap();
        for n in 0..2 {
            for i in 0..4 {
                for j in 0..5 {
                    let s: f32 = (0..3).map(|c| y.at4(n, c, i, j)).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!((0..3).all(|c| (0.0..=1.0).contains(&y.at4(n, c, i, j))));
                }
            }
        }
    }
}
