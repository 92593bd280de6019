//! Numeric kernels with explicit forward and backward passes.
//!
//! Each operation is available as a pure function pair (`op`, `op_backward`)
//! and, where it carries weights, as a [`Layer`] that owns its parameters and
//! caches what its backward pass needs. The network is a fixed feed-forward
//! graph, so composite blocks simply call their children's backward passes in
//! reverse order.

mod activation;
mod adam;
mod batchnorm;
mod concat;
mod conv;
pub mod gradcheck;
mod loss;
mod separable;
mod transposed;

pub use activation::{relu, relu_backward, softmax_channels, Relu};
pub use adam::{adam_step, Adam, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use batchnorm::{batchnorm, batchnorm_backward, BatchNorm2d, BnCache, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use concat::{concat_channels, concat_channels_backward};
pub use conv::{conv2d, conv2d_backward, Conv2d, ConvGrads, ConvSpec};
pub use loss::cross_entropy_loss;
pub use separable::{depthwise_separable_conv, depthwise_separable_conv_backward, SeparableConv2d, SeparableGrads};
pub use transposed::{transposed_conv2d, transposed_conv2d_backward, TransposedConv2d};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Whether batch statistics or running statistics drive normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

pub type NamedParams<'a, T> = Vec<(String, &'a Param<T>)>;
pub type NamedParamsMut<'a, T> = Vec<(String, &'a mut Param<T>)>;
pub type NamedBuffers<'a, T> = Vec<(String, &'a Tensor<T>)>;
pub type NamedBuffersMut<'a, T> = Vec<(String, &'a mut Tensor<T>)>;

/// A differentiable stage of the network.
pub trait Layer<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Accumulates parameter gradients from the last forward call and
    /// returns the gradient with respect to that call's input.
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>>;

    fn params(&self) -> NamedParams<'_, T>;

    fn params_mut(&mut self) -> NamedParamsMut<'_, T>;

    /// Non-trainable state (batch-norm running statistics).
    fn buffers(&self) -> NamedBuffers<'_, T> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> NamedBuffersMut<'_, T> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Prepends `prefix.` to every name in a named list.
pub(crate) fn prefixed<V>(prefix: &str, items: Vec<(String, V)>) -> Vec<(String, V)> {
    items
        .into_iter()
        .map(|(name, v)| (format!("{prefix}.{name}"), v))
        .collect()
}

/// He (fan-in scaled normal) initialization standard deviation.
pub(crate) fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}
