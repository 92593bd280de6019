//! The 64-bit finite-difference suite run by `fesnet gradcheck` and the tests.

use crate::error::Result;
use crate::model::{FebBlock, FesNet, FuseHead, ModelConfig, PcbBlock, PcbWiring};
use crate::nn::gradcheck::{gradcheck, gradcheck_fn, GradcheckConfig, GradcheckReport};
use crate::nn::{
    concat_channels, concat_channels_backward, cross_entropy_loss, softmax_channels, BatchNorm2d, Conv2d, ConvSpec,
    Layer, Mode, NamedParams, NamedParamsMut, Relu, SeparableConv2d, TransposedConv2d,
};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Tolerance for a single layer type.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Tolerance for the sampled check of the whole network.
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradcheckReport,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

/// Two convolutions whose outputs are concatenated, so the concat backward
/// has to route gradients to both branches.
struct ConcatPair {
    a: Conv2d<f64>,
    b: Conv2d<f64>,
    split: [usize; 2],
}

impl Layer<f64> for ConcatPair {
    fn forward(&mut self, x: &Tensor<f64>, mode: Mode) -> Result<Tensor<f64>> {
        let ya = self.a.forward(x, mode)?;
        let yb = self.b.forward(x, mode)?;
        concat_channels(&[&ya, &yb])
    }

    fn backward(&mut self, dy: &Tensor<f64>) -> Result<Tensor<f64>> {
        let parts = concat_channels_backward(dy, &self.split)?;
        let mut dx = self.a.backward(&parts[0])?;
        dx.add_assign(&self.b.backward(&parts[1])?)?;
        Ok(dx)
    }

    fn params(&self) -> NamedParams<'_, f64> {
        let mut p = crate::nn::prefixed("a", self.a.params());
        p.extend(crate::nn::prefixed("b", self.b.params()));
        p
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, f64> {
        let mut p = crate::nn::prefixed("a", self.a.params_mut());
        p.extend(crate::nn::prefixed("b", self.b.params_mut()));
        p
    }
}

/// Adapts the fuse head (two inputs) to a single input split along channels.
struct FuseAdapter {
    head: FuseHead<f64>,
    split: [usize; 2],
}

impl Layer<f64> for FuseAdapter {
    fn forward(&mut self, x: &Tensor<f64>, mode: Mode) -> Result<Tensor<f64>> {
        let parts = concat_channels_backward(x, &self.split)?;
        Ok(self.head.forward(&parts[0], &parts[1], mode)?.1)
    }

    fn backward(&mut self, dy: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (a, b) = self.head.backward(dy)?;
        concat_channels(&[&a, &b])
    }

    fn params(&self) -> NamedParams<'_, f64> {
        self.head.params()
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, f64> {
        self.head.params_mut()
    }
}

/// Input whose entries stay clear of zero so ReLU kinks are not straddled.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = Tensor::<f64>::uniform(shape, 0.1, 1.0, &mut seeded(seed));
    let signs = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut seeded(seed + 1));
    for (v, s) in t.data_mut().iter_mut().zip(signs.data()) {
        if *s < 0.0 {
            *v = -*v;
        }
    }
    t
}

fn entry(name: &str, report: GradcheckReport, tolerance: f64) -> SuiteEntry {
    SuiteEntry {
        name: name.to_string(),
        report,
        tolerance,
    }
}

/// Runs every layer type and the full network (batch 2, 16 x 16 input).
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = seeded(seed);
    let cfg = GradcheckConfig {
        seed,
        ..GradcheckConfig::default()
    };
    let mut out = Vec::new();
    let mut check = |name: &str, layer: &mut dyn Layer<f64>, x: &Tensor<f64>, tol: f64| -> Result<()> {
        out.push(entry(name, gradcheck(layer, x, &cfg)?, tol));
        Ok(())
    };
    let x = Tensor::<f64>::randn(&[2, 3, 7, 6], 1.0, &mut rng);

    check(
        "conv2d 3x3",
        &mut Conv2d::new(ConvSpec::same(3, 4, 3), &mut rng)?,
        &x,
        LAYER_TOLERANCE,
    )?;
    check(
        "conv2d 3x3 stride 2",
        &mut Conv2d::new(ConvSpec::same(3, 4, 3).with_stride(2), &mut rng)?,
        &x,
        LAYER_TOLERANCE,
    )?;
    check(
        "conv2d 3x3 dilation 2",
        &mut Conv2d::new(ConvSpec::same(3, 2, 3).with_dilation(2).with_padding(2), &mut rng)?,
        &x,
        LAYER_TOLERANCE,
    )?;
    check(
        "conv2d 1x1",
        &mut Conv2d::new(ConvSpec::same(3, 5, 1), &mut rng)?,
        &x,
        LAYER_TOLERANCE,
    )?;
    check(
        "depthwise-separable 3x3",
        &mut SeparableConv2d::new(3, 4, 3, &mut rng)?,
        &x,
        LAYER_TOLERANCE,
    )?;
    check(
        "transposed conv k4 s4",
        &mut TransposedConv2d::new(3, 2, 4, 4, &mut rng)?,
        &x,
        LAYER_TOLERANCE,
    )?;
    check(
        "transposed conv k3 s2",
        &mut TransposedConv2d::new(3, 2, 3, 2, &mut rng)?,
        &x,
        LAYER_TOLERANCE,
    )?;
    let mut bn = BatchNorm2d::new(3);
    for (_, p) in bn.params_mut() {
        p.value = Tensor::uniform(p.value.shape(), 0.5, 1.5, &mut rng);
    }
    check("batchnorm (train)", &mut bn, &x, LAYER_TOLERANCE)?;
    check(
        "relu",
        &mut Relu::default(),
        &away_from_zero(&[2, 3, 5, 5], seed),
        LAYER_TOLERANCE,
    )?;
    check(
        "concat",
        &mut ConcatPair {
            a: Conv2d::new(ConvSpec::same(3, 2, 3), &mut rng)?,
            b: Conv2d::new(ConvSpec::same(3, 3, 1), &mut rng)?,
            split: [2, 3],
        },
        &x,
        LAYER_TOLERANCE,
    )?;

    let xb = Tensor::<f64>::randn(&[2, 4, 8, 8], 1.0, &mut rng);
    check(
        "prompt conv block",
        &mut PcbBlock::new(4, 4, PcbWiring::Sequential, 1, &mut rng)?,
        &xb,
        LAYER_TOLERANCE,
    )?;
    check(
        "feature enhancement block",
        &mut FebBlock::new(4, &[3, 4], &mut rng)?,
        &xb,
        LAYER_TOLERANCE,
    )?;
    check(
        "fuse head",
        &mut FuseAdapter {
            head: FuseHead::new(4, 3, 2, &mut rng)?,
            split: [2, 2],
        },
        &xb,
        LAYER_TOLERANCE,
    )?;

    // Softmax followed by masked cross-entropy, as a scalar of the logits.
    let logits = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut rng);
    let target = Tensor::<f64>::from_vec(&[2, 4, 4], (0..32).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect())?;
    let weight = Tensor::<f64>::from_vec(&[2, 4, 4], (0..32).map(|i| (i % 5 != 0) as u8 as f64).collect())?;
    let loss =
        |z: &Tensor<f64>| -> Result<f64> { Ok(cross_entropy_loss(&softmax_channels(z)?, &target, Some(&weight))?.0) };
    let (_, dlogits) = cross_entropy_loss(&softmax_channels(&logits)?, &target, Some(&weight))?;
    out.push(entry(
        "softmax + cross-entropy",
        gradcheck_fn(
            loss,
            &logits,
            &dlogits,
            &GradcheckConfig {
                samples_per_tensor: 64,
                ..cfg.clone()
            },
        )?,
        LAYER_TOLERANCE,
    ));

    let mut model = FesNet::<f64>::new(ModelConfig::default(), &mut rng)?;
    let xm = Tensor::<f64>::randn(&[2, 3, 16, 16], 1.0, &mut rng);
    out.push(entry(
        "fesnet (full model)",
        gradcheck(
            &mut model,
            &xm,
            &GradcheckConfig {
                samples_per_tensor: 4,
                ..cfg.clone()
            },
        )?,
        MODEL_TOLERANCE,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for e in run_suite(3).unwrap() {
            assert!(e.passed(), "{}: {:?}", e.name, e.report);
        }
    }
}
