use rand::Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{up_block, ConvBnRelu, FebBlock, PcbBlock, PcbWiring, UpBlock, FEB_MAX_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, concat_channels_backward, prefixed, softmax_channels, Conv2d, ConvSpec, Layer, Mode, NamedBuffers,
    NamedBuffersMut, NamedParams, NamedParamsMut,
};
use crate::tensor::{Scalar, Tensor};

/// Architecture hyperparameters. The defaults are the reference network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Output width of each prompt convolutional block.
    pub pcb_channels: Vec<usize>,
    pub pcb_wiring: PcbWiring,
    /// Dilation of the stride-2 downsampling convolution inside each PCB.
    pub down_dilation: usize,
    /// Output width of each transposed-convolution upsampling stage.
    pub head_channels: Vec<usize>,
    /// Kernel and stride of each upsampling stage.
    pub head_factor: usize,
    pub feb_channels: Vec<usize>,
    pub fuse_channels: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            stem_channels: 16,
            pcb_channels: vec![16, 32, 64, 128],
            pcb_wiring: PcbWiring::Sequential,
            down_dilation: 1,
            head_channels: vec![32, 16],
            head_factor: 4,
            feb_channels: vec![8, 16, 16, 16],
            fuse_channels: 16,
            classes: 2,
        }
    }
}

impl ModelConfig {
    /// Spatial extents must be multiples of this.
    pub fn downsample_factor(&self) -> usize {
        1 << self.pcb_channels.len()
    }

    pub fn upsample_factor(&self) -> usize {
        self.head_factor.pow(self.head_channels.len() as u32)
    }

    /// Channels of the concatenated upsampled and enhanced features.
    pub fn fused_channels(&self) -> usize {
        self.head_channels.last().copied().unwrap_or(0) + self.feb_channels.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "model_config";
        let all = [
            self.in_channels,
            self.stem_channels,
            self.fuse_channels,
            self.head_factor,
            self.down_dilation,
        ]
        .into_iter()
        .chain(self.pcb_channels.iter().copied())
        .chain(self.head_channels.iter().copied())
        .chain(self.feb_channels.iter().copied());
        if all.clone().any(|v| v == 0) {
            return Err(Error::invalid(OP, "all widths, factors and dilations must be >= 1"));
        }
        if self.pcb_channels.is_empty() || self.head_channels.is_empty() || self.feb_channels.is_empty() {
            return Err(Error::invalid(OP, "pcb, head and feb stages must be non-empty"));
        }
        if self.downsample_factor() != self.upsample_factor() {
            return Err(Error::invalid(
                OP,
                format!(
                    "downsampling factor {} is not undone by the head ({} stages of x{} = {})",
                    self.downsample_factor(),
                    self.head_channels.len(),
                    self.head_factor,
                    self.upsample_factor()
                ),
            ));
        }
        if let Some(w) = self.feb_channels.iter().find(|&&w| w > FEB_MAX_CHANNELS) {
            return Err(Error::invalid(OP, format!("feb width {w} exceeds {FEB_MAX_CHANNELS}")));
        }
        if self.classes != 2 {
            return Err(Error::invalid(
                OP,
                format!("only 2 classes are supported, got {}", self.classes),
            ));
        }
        Ok(())
    }
}

/// Named intermediate features of one forward pass.
#[derive(Clone, Debug)]
pub struct Features<T> {
    /// Stem output, the tap read by the enhancement block.
    pub f_i: Tensor<T>,
    /// Output of the last PCB.
    pub f_d: Tensor<T>,
    /// Output of the upsampling head.
    pub f_us: Tensor<T>,
    /// Output of the enhancement block.
    pub f_e: Tensor<T>,
    /// `concat(f_us, f_e)`.
    pub s_c: Tensor<T>,
    pub logits: Tensor<T>,
}

/// Fusion of the upsampled and enhanced features into per-pixel class logits.
#[derive(Clone, Debug)]
pub struct FuseHead<T> {
    pub fuse: ConvBnRelu<Conv2d<T>, T>,
    pub classifier: Conv2d<T>,
    split: Option<(usize, usize)>,
}

impl<T: Scalar> FuseHead<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, width: usize, classes: usize, rng: &mut R) -> Result<Self> {
        Ok(FuseHead {
            fuse: ConvBnRelu::conv(ConvSpec::same(in_channels, width, 3), rng)?,
            classifier: Conv2d::new(ConvSpec::same(width, classes, 1), rng)?,
            split: None,
        })
    }

    /// Returns `(s_c, logits)`.
    pub fn forward(&mut self, f_us: &Tensor<T>, f_e: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        let (a, b) = (f_us.shape(), f_e.shape());
        if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
            return Err(Error::invalid(
                "fuse_and_classify",
                format!("upsampled features {a:?} and enhanced features {b:?} must share batch and spatial extents"),
            ));
        }
        let s_c = concat_channels(&[f_us, f_e])?;
        self.split = Some((a[1], b[1]));
        let h = self.fuse.forward(&s_c, mode)?;
        let logits = self.classifier.forward(&h, mode)?;
        Ok((s_c, logits))
    }

    /// Per-pixel class probabilities.
    pub fn classify(&mut self, f_us: &Tensor<T>, f_e: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (_, logits) = self.forward(f_us, f_e, mode)?;
        softmax_channels(&logits)
    }

    /// Returns `(d f_us, d f_e)`.
    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (cu, ce) = self
            .split
            .ok_or_else(|| Error::invalid("fuse_backward", "backward called before forward"))?;
        let dh = self.classifier.backward(dlogits)?;
        let ds = self.fuse.backward(&dh)?;
        let mut parts = concat_channels_backward(&ds, &[cu, ce])?.into_iter();
        Ok((parts.next().unwrap(), parts.next().unwrap()))
    }

    pub fn params(&self) -> NamedParams<'_, T> {
        let mut out = prefixed("fuse", self.fuse.params());
        out.extend(prefixed("classifier", self.classifier.params()));
        out
    }

    pub fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        let mut out = prefixed("fuse", self.fuse.params_mut());
        out.extend(prefixed("classifier", self.classifier.params_mut()));
        out
    }
}

/// The segmentation network: stem, PCB encoder, shallow transposed-conv
/// head, feature enhancement branch, and fusion classifier.
#[derive(Clone, Debug)]
pub struct FesNet<T> {
    pub config: ModelConfig,
    pub stem: ConvBnRelu<Conv2d<T>, T>,
    pub pcbs: Vec<PcbBlock<T>>,
    pub head: Vec<UpBlock<T>>,
    pub feb: FebBlock<T>,
    pub fuse: FuseHead<T>,
}

impl<T: Scalar> FesNet<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = ConvBnRelu::conv(ConvSpec::same(config.in_channels, config.stem_channels, 3), rng)?;
        let mut pcbs = Vec::with_capacity(config.pcb_channels.len());
        let mut c = config.stem_channels;
        for &w in &config.pcb_channels {
            pcbs.push(PcbBlock::new(c, w, config.pcb_wiring, config.down_dilation, rng)?);
            c = w;
        }
        let mut head = Vec::with_capacity(config.head_channels.len());
        for &w in &config.head_channels {
            head.push(up_block(c, w, config.head_factor, rng)?);
            c = w;
        }
        let feb = FebBlock::new(config.stem_channels, &config.feb_channels, rng)?;
        let fuse = FuseHead::new(config.fused_channels(), config.fuse_channels, config.classes, rng)?;
        Ok(FesNet {
            config,
            stem,
            pcbs,
            head,
            feb,
            fuse,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        const OP: &str = "fesnet_forward";
        let (_, c, h, w) = x.dims4(OP)?;
        if c != self.config.in_channels {
            return Err(Error::shape(OP, "channels", self.config.in_channels, c));
        }
        let m = self.config.downsample_factor();
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(
                OP,
                format!("extent {h}x{w} is not a multiple of {m}; pad the input"),
            ));
        }
        Ok(())
    }

    /// Forward pass returning every named feature.
    pub fn forward_features(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Features<T>> {
        self.check_input(x)?;
        let f_i = self.stem.forward(x, mode)?;
        let mut h = f_i.clone();
        for pcb in &mut self.pcbs {
            h = pcb.forward(&h, mode)?;
        }
        let f_d = h.clone();
        for up in &mut self.head {
            h = up.forward(&h, mode)?;
        }
        let f_us = h;
        let f_e = self.feb.forward(&f_i, mode)?;
        let (s_c, logits) = self.fuse.forward(&f_us, &f_e, mode)?;
        Ok(Features {
            f_i,
            f_d,
            f_us,
            f_e,
            s_c,
            logits,
        })
    }

    /// Per-pixel class probabilities (`n x 2 x h x w`).
    pub fn forward_probs(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let logits = self.forward(x, mode)?;
        softmax_channels(&logits)
    }

    /// Inference-mode probabilities.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_probs(x, Mode::Inference)
    }
}

impl<T: Scalar> Layer<T> for FesNet<T> {
    /// Class logits; see [`FesNet::forward_probs`] for probabilities.
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_features(x, mode)?.logits)
    }

    /// Takes the gradient with respect to the logits.
    fn backward(&mut self, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        let (d_us, d_e) = self.fuse.backward(dlogits)?;
        let mut g = d_us;
        for up in self.head.iter_mut().rev() {
            g = up.backward(&g)?;
        }
        for pcb in self.pcbs.iter_mut().rev() {
            g = pcb.backward(&g)?;
        }
        g.add_assign(&self.feb.backward(&d_e)?)?;
        self.stem.backward(&g)
    }

    fn params(&self) -> NamedParams<'_, T> {
        let mut out = prefixed("stem", self.stem.params());
        for (i, p) in self.pcbs.iter().enumerate() {
            out.extend(prefixed(&format!("pcb{}", i + 1), p.params()));
        }
        for (i, u) in self.head.iter().enumerate() {
            out.extend(prefixed(&format!("head{}", i + 1), u.params()));
        }
        out.extend(prefixed("feb", self.feb.params()));
        out.extend(self.fuse.params());
        out
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        let mut out = prefixed("stem", self.stem.params_mut());
        for (i, p) in self.pcbs.iter_mut().enumerate() {
            out.extend(prefixed(&format!("pcb{}", i + 1), p.params_mut()));
        }
        for (i, u) in self.head.iter_mut().enumerate() {
            out.extend(prefixed(&format!("head{}", i + 1), u.params_mut()));
        }
        out.extend(prefixed("feb", self.feb.params_mut()));
        out.extend(self.fuse.params_mut());
        out
    }

    fn buffers(&self) -> NamedBuffers<'_, T> {
        let mut out = prefixed("stem", self.stem.buffers());
        for (i, p) in self.pcbs.iter().enumerate() {
            out.extend(prefixed(&format!("pcb{}", i + 1), p.buffers()));
        }
        for (i, u) in self.head.iter().enumerate() {
            out.extend(prefixed(&format!("head{}", i + 1), u.buffers()));
        }
        out.extend(prefixed("feb", self.feb.buffers()));
        out.extend(prefixed("fuse", self.fuse.fuse.buffers()));
        out
    }

    fn buffers_mut(&mut self) -> NamedBuffersMut<'_, T> {
        let mut out = prefixed("stem", self.stem.buffers_mut());
        for (i, p) in self.pcbs.iter_mut().enumerate() {
            out.extend(prefixed(&format!("pcb{}", i + 1), p.buffers_mut()));
        }
        for (i, u) in self.head.iter_mut().enumerate() {
            out.extend(prefixed(&format!("head{}", i + 1), u.buffers_mut()));
        }
        out.extend(prefixed("feb", self.feb.buffers_mut()));
        out.extend(prefixed("fuse", self.fuse.fuse.buffers_mut()));
        out
    }
}
