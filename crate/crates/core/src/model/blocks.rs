use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, concat_channels_backward, prefixed, BatchNorm2d, Conv2d, ConvSpec, Layer, Mode, NamedBuffers,
    NamedBuffersMut, NamedParams, NamedParamsMut, Relu, SeparableConv2d, TransposedConv2d,
};
use crate::tensor::{Scalar, Tensor};

/// A linear stage followed by batch normalization and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu<L, T> {
    pub conv: L,
    pub bn: BatchNorm2d<T>,
    relu: Relu<T>,
}

impl<L: Layer<T>, T: Scalar> ConvBnRelu<L, T> {
    pub fn wrap(conv: L, out_channels: usize) -> Self {
        ConvBnRelu {
            conv,
            bn: BatchNorm2d::new(out_channels),
            relu: Relu::default(),
        }
    }
}

impl<T: Scalar> ConvBnRelu<Conv2d<T>, T> {
    pub fn conv<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Result<Self> {
        Ok(Self::wrap(Conv2d::new(spec, rng)?, spec.out_channels))
    }
}

impl<L: Layer<T>, T: Scalar> Layer<T> for ConvBnRelu<L, T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let z = self.conv.forward(x, mode)?;
        let n = self.bn.forward(&z, mode)?;
        self.relu.forward(&n, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dn = self.relu.backward(dy)?;
        let dz = self.bn.backward(&dn)?;
        self.conv.backward(&dz)
    }

    fn params(&self) -> NamedParams<'_, T> {
        let mut out = prefixed("conv", self.conv.params());
        out.extend(prefixed("bn", self.bn.params()));
        out
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        let mut out = prefixed("conv", self.conv.params_mut());
        out.extend(prefixed("bn", self.bn.params_mut()));
        out
    }

    fn buffers(&self) -> NamedBuffers<'_, T> {
        prefixed("bn", self.bn.buffers())
    }

    fn buffers_mut(&mut self) -> NamedBuffersMut<'_, T> {
        prefixed("bn", self.bn.buffers_mut())
    }
}

/// How the three PCB branches are connected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PcbWiring {
    /// `a = conv3x3(x); b = sepconv(a); c = conv1x1(b)`, all three concatenated.
    #[default]
    Sequential,
    /// All three branches read the block input.
    Parallel,
}

/// Prompt convolutional block: three branches merged by depth-wise
/// concatenation, then halved in resolution by a stride-2 convolution.
#[derive(Clone, Debug)]
pub struct PcbBlock<T> {
    pub conv_a: ConvBnRelu<Conv2d<T>, T>,
    pub conv_b: ConvBnRelu<SeparableConv2d<T>, T>,
    pub conv_c: ConvBnRelu<Conv2d<T>, T>,
    pub down: ConvBnRelu<Conv2d<T>, T>,
    pub wiring: PcbWiring,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Intermediate and final PCB outputs.
#[derive(Clone, Debug)]
pub struct PcbOutput<T> {
    pub concat: Tensor<T>,
    pub output: Tensor<T>,
}

impl<T: Scalar> PcbBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        wiring: PcbWiring,
        down_dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = out_channels;
        let branch_in = match wiring {
            PcbWiring::Sequential => c,
            PcbWiring::Parallel => in_channels,
        };
        let sep = SeparableConv2d::new(branch_in, c, 3, rng)?;
        Ok(PcbBlock {
            conv_a: ConvBnRelu::conv(ConvSpec::same(in_channels, c, 3), rng)?,
            conv_b: ConvBnRelu::wrap(sep, c),
            conv_c: ConvBnRelu::conv(ConvSpec::same(branch_in, c, 1), rng)?,
            down: ConvBnRelu::conv(
                ConvSpec::same(3 * c, c, 3)
                    .with_stride(2)
                    .with_dilation(down_dilation)
                    .with_padding(down_dilation),
                rng,
            )?,
            wiring,
            in_channels,
            out_channels,
        })
    }

    pub fn forward_detailed(&mut self, x: &Tensor<T>, mode: Mode) -> Result<PcbOutput<T>> {
        let (_, _, h, w) = x.dims4("pcb_forward")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "pcb_forward",
                format!("spatial extent {h}x{w} must be even; pad the input upstream"),
            ));
        }
        let a = self.conv_a.forward(x, mode)?;
        let (b, c) = match self.wiring {
            PcbWiring::Sequential => {
                let b = self.conv_b.forward(&a, mode)?;
                let c = self.conv_c.forward(&b, mode)?;
                (b, c)
            }
            PcbWiring::Parallel => (self.conv_b.forward(x, mode)?, self.conv_c.forward(x, mode)?),
        };
        let concat = concat_channels(&[&a, &b, &c])?;
        let output = self.down.forward(&concat, mode)?;
        Ok(PcbOutput { concat, output })
    }
}

impl<T: Scalar> Layer<T> for PcbBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_detailed(x, mode)?.output)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.out_channels;
        let dcat = self.down.backward(dy)?;
        let mut parts = concat_channels_backward(&dcat, &[c, c, c])?.into_iter();
        let (mut da, mut db, mut dc) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
        match self.wiring {
            PcbWiring::Sequential => {
                db.add_assign(&self.conv_c.backward(&dc)?)?;
                da.add_assign(&self.conv_b.backward(&db)?)?;
                self.conv_a.backward(&da)
            }
            PcbWiring::Parallel => {
                let mut dx = self.conv_a.backward(&da)?;
                dx.add_assign(&self.conv_b.backward(&db)?)?;
                dc = self.conv_c.backward(&dc)?;
                dx.add_assign(&dc)?;
                Ok(dx)
            }
        }
    }

    fn params(&self) -> NamedParams<'_, T> {
        let mut out = prefixed("conv_a", self.conv_a.params());
        out.extend(prefixed("conv_b", self.conv_b.params()));
        out.extend(prefixed("conv_c", self.conv_c.params()));
        out.extend(prefixed("down", self.down.params()));
        out
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        let mut out = prefixed("conv_a", self.conv_a.params_mut());
        out.extend(prefixed("conv_b", self.conv_b.params_mut()));
        out.extend(prefixed("conv_c", self.conv_c.params_mut()));
        out.extend(prefixed("down", self.down.params_mut()));
        out
    }

    fn buffers(&self) -> NamedBuffers<'_, T> {
        let mut out = prefixed("conv_a", self.conv_a.buffers());
        out.extend(prefixed("conv_b", self.conv_b.buffers()));
        out.extend(prefixed("conv_c", self.conv_c.buffers()));
        out.extend(prefixed("down", self.down.buffers()));
        out
    }

    fn buffers_mut(&mut self) -> NamedBuffersMut<'_, T> {
        let mut out = prefixed("conv_a", self.conv_a.buffers_mut());
        out.extend(prefixed("conv_b", self.conv_b.buffers_mut()));
        out.extend(prefixed("conv_c", self.conv_c.buffers_mut()));
        out.extend(prefixed("down", self.down.buffers_mut()));
        out
    }
}

/// Maximum width of any feature-enhancement layer.
pub const FEB_MAX_CHANNELS: usize = 16;

/// Feature enhancement block: a shallow stack of stride-1 3x3 convolutions
/// that carries full-resolution detail to the end of the network.
#[derive(Clone, Debug)]
pub struct FebBlock<T> {
    pub layers: Vec<ConvBnRelu<Conv2d<T>, T>>,
}

impl<T: Scalar> FebBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, widths: &[usize], rng: &mut R) -> Result<Self> {
        if let Some(&w) = widths.iter().find(|&&w| w > FEB_MAX_CHANNELS) {
            return Err(Error::invalid(
                "feb",
                format!("layer width {w} exceeds the {FEB_MAX_CHANNELS}-channel limit"),
            ));
        }
        if widths.is_empty() {
            return Err(Error::invalid("feb", "at least one layer is required"));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut c_in = in_channels;
        for &w in widths {
            layers.push(ConvBnRelu::conv(ConvSpec::same(c_in, w, 3), rng)?);
            c_in = w;
        }
        Ok(FebBlock { layers })
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.conv.spec.out_channels)
    }
}

impl<T: Scalar> Layer<T> for FebBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = dy.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> NamedParams<'_, T> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(prefixed(&i.to_string(), l.params()));
        }
        out
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(prefixed(&i.to_string(), l.params_mut()));
        }
        out
    }

    fn buffers(&self) -> NamedBuffers<'_, T> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(prefixed(&i.to_string(), l.buffers()));
        }
        out
    }

    fn buffers_mut(&mut self) -> NamedBuffersMut<'_, T> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(prefixed(&i.to_string(), l.buffers_mut()));
        }
        out
    }
}

/// Upsampling unit of the shallow decoder head.
pub type UpBlock<T> = ConvBnRelu<TransposedConv2d<T>, T>;

pub fn up_block<T: Scalar, R: Rng + ?Sized>(
    in_channels: usize,
    out_channels: usize,
    factor: usize,
    rng: &mut R,
) -> Result<UpBlock<T>> {
    Ok(ConvBnRelu::wrap(
        TransposedConv2d::new(in_channels, out_channels, factor, factor, rng)?,
        out_channels,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn pcb_shapes_small() {
        let mut rng = seeded(0);
        let mut pcb = PcbBlock::<f32>::new(3, 16, PcbWiring::Sequential, 1, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut rng);
        let out = pcb.forward_detailed(&x, Mode::Train).unwrap();
        assert_eq!(out.concat.shape(), &[1, 48, 32, 32]);
        assert_eq!(out.output.shape(), &[1, 16, 16, 16]);
    }

    #[test]
    fn pcb_shapes_deep() {
        let mut rng = seeded(0);
        let mut pcb = PcbBlock::<f32>::new(64, 128, PcbWiring::Sequential, 1, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 64, 40, 40], 1.0, &mut rng);
        assert_eq!(pcb.forward(&x, Mode::Inference).unwrap().shape(), &[1, 128, 20, 20]);
    }

    #[test]
    fn pcb_rejects_odd_extent() {
        let mut rng = seeded(0);
        let mut pcb = PcbBlock::<f32>::new(3, 4, PcbWiring::Sequential, 1, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 3, 9, 8]);
        assert!(pcb.forward(&x, Mode::Train).is_err());
    }

    #[test]
    fn parallel_wiring_shapes() {
        let mut rng = seeded(0);
        let mut pcb = PcbBlock::<f32>::new(3, 8, PcbWiring::Parallel, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng);
        let out = pcb.forward_detailed(&x, Mode::Train).unwrap();
        assert_eq!(out.concat.shape(), &[1, 24, 16, 16]);
        assert_eq!(out.output.shape(), &[1, 8, 8, 8]);
        let dx = pcb.backward(&Tensor::ones(&[1, 8, 8, 8])).unwrap();
        assert_eq!(dx.shape(), x.shape());
    }

    #[test]
    fn feb_preserves_resolution() {
        let mut rng = seeded(0);
        let mut feb = FebBlock::<f32>::new(16, &[8, 16, 16, 16], &mut rng).unwrap();
        let x = Tensor::randn(&[1, 16, 64, 64], 1.0, &mut rng);
        assert_eq!(feb.forward(&x, Mode::Train).unwrap().shape(), &[1, 16, 64, 64]);
    }

    #[test]
    fn feb_refuses_wide_layers() {
        assert!(FebBlock::<f32>::new(16, &[8, 32], &mut seeded(0)).is_err());
    }
}
