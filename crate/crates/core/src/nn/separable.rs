use rand::Rng;

use super::conv::{conv2d, conv2d_backward, Conv2d, ConvSpec};
use super::{prefixed, Layer, Mode, NamedParams, NamedParamsMut};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Depthwise `k x k` filtering followed by a `1 x 1` channel mix.
pub fn depthwise_separable_conv<T: Scalar>(
    x: &Tensor<T>,
    w_depth: &Tensor<T>,
    b_depth: &Tensor<T>,
    w_point: &Tensor<T>,
    b_point: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (depth, point) = specs_from_weights(x, w_depth, w_point)?;
    let mid = conv2d(x, w_depth, b_depth, &depth)?;
    conv2d(&mid, w_point, b_point, &point)
}

#[derive(Clone, Debug)]
pub struct SeparableGrads<T> {
    pub dx: Tensor<T>,
    pub dw_depth: Tensor<T>,
    pub db_depth: Tensor<T>,
    pub dw_point: Tensor<T>,
    pub db_point: Tensor<T>,
}

pub fn depthwise_separable_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w_depth: &Tensor<T>,
    b_depth: &Tensor<T>,
    w_point: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<SeparableGrads<T>> {
    let (depth, point) = specs_from_weights(x, w_depth, w_point)?;
    let mid = conv2d(x, w_depth, b_depth, &depth)?;
    let gp = conv2d_backward(&mid, w_point, &point, dy)?;
    let gd = conv2d_backward(x, w_depth, &depth, &gp.dx)?;
    Ok(SeparableGrads {
        dx: gd.dx,
        dw_depth: gd.dw,
        db_depth: gd.db,
        dw_point: gp.dw,
        db_point: gp.db,
    })
}

fn specs_from_weights<T: Scalar>(
    x: &Tensor<T>,
    w_depth: &Tensor<T>,
    w_point: &Tensor<T>,
) -> Result<(ConvSpec, ConvSpec)> {
    const OP: &str = "depthwise_separable_conv";
    let (_, c, _, _) = x.dims4(OP)?;
    let (dc, per, kh, kw) = w_depth.dims4(OP)?;
    if per != 1 {
        return Err(Error::shape(OP, "depthwise weight in_channels per filter", 1, per));
    }
    if dc != c {
        return Err(Error::shape(OP, "depthwise filters", c, dc));
    }
    let (co, ci, ph, pw) = w_point.dims4(OP)?;
    if ci != c {
        return Err(Error::shape(OP, "pointwise in_channels", c, ci));
    }
    if (ph, pw) != (1, 1) {
        return Err(Error::shape(OP, "pointwise kernel", 1, ph.max(pw)));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::invalid(
            OP,
            format!("depthwise kernel must be odd and square, got {kh}x{kw}"),
        ));
    }
    Ok((ConvSpec::depthwise(c, kh), ConvSpec::same(c, co, 1)))
}

/// Depthwise-separable convolution layer.
#[derive(Clone, Debug)]
pub struct SeparableConv2d<T> {
    pub depthwise: Conv2d<T>,
    pub pointwise: Conv2d<T>,
}

impl<T: Scalar> SeparableConv2d<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        Ok(SeparableConv2d {
            depthwise: Conv2d::new(ConvSpec::depthwise(in_channels, kernel), rng)?,
            pointwise: Conv2d::new(ConvSpec::same(in_channels, out_channels, 1), rng)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.spec.param_count() + self.pointwise.spec.param_count()
    }
}

impl<T: Scalar> Layer<T> for SeparableConv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mid = self.depthwise.forward(x, mode)?;
        self.pointwise.forward(&mid, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dmid = self.pointwise.backward(dy)?;
        self.depthwise.backward(&dmid)
    }

    fn params(&self) -> NamedParams<'_, T> {
        let mut out = prefixed("depthwise", self.depthwise.params());
        out.extend(prefixed("pointwise", self.pointwise.params()));
        out
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        let mut out = prefixed("depthwise", self.depthwise.params_mut());
        out.extend(prefixed("pointwise", self.pointwise.params_mut()));
        out
    }
}
