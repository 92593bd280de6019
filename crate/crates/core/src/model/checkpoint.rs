//! Versioned checkpoint files.
//!
//! Layout:
//!
//! ```text
//! FESNET-CHECKPOINT <version>\n
//! <header length in bytes>\n
//! <JSON header>\n
//! <payload: little-endian f32 values of every tensor, in header order>
//! ```
//!
//! The header records the model configuration, training metadata, and for
//! every tensor its name, kind, shape and element offset into the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fesnet::{FesNet, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamState, Layer};
use crate::rng::{seeded, RNG_ALGORITHM};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &str = "FESNET-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub rng: String,
    /// Width images are resized to before inference.
    pub target_width: usize,
    /// ADAM step counter when optimizer state is included.
    pub adam_t: Option<u64>,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta {
            seed: 0,
            epoch: 0,
            step: 0,
            rng: RNG_ALGORITHM.to_string(),
            target_width: crate::data::DEFAULT_TARGET_WIDTH,
            adam_t: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: usize,
}

/// A checkpoint held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub payload: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &FesNet<T>, meta: CheckpointMeta, adam: Option<&Adam<T>>) -> Self {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: &str, kind: TensorKind, t: &Tensor<T>| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            payload.extend(t.data().iter().map(|v| v.as_f64() as f32));
        };
        for (name, p) in model.params() {
            push(&name, TensorKind::Param, &p.value);
        }
        for (name, b) in model.buffers() {
            push(&name, TensorKind::Buffer, b);
        }
        let mut meta = meta;
        if let Some(adam) = adam.filter(|a| !a.states.is_empty()) {
            meta.adam_t = adam.states.first().map(|(_, s)| s.t);
            for (name, s) in &adam.states {
                push(name, TensorKind::AdamM, &s.m);
                push(name, TensorKind::AdamV, &s.v);
            }
        }
        Checkpoint {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                model: model.config.clone(),
                meta,
                tensors,
                payload_len: payload.len(),
            },
            payload,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 64 + 4 * self.payload.len());
        writeln!(out, "{CHECKPOINT_MAGIC} {}", self.header.format_version)?;
        writeln!(out, "{}", header.len())?;
        out.extend_from_slice(&header);
        out.push(b'\n');
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (magic_line, rest) =
            split_line(bytes).ok_or_else(|| Error::CheckpointTruncated("missing magic line".into()))?;
        let magic_line =
            std::str::from_utf8(magic_line).map_err(|_| Error::CheckpointMalformed("magic line is not text".into()))?;
        let version = magic_line
            .strip_prefix(CHECKPOINT_MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::CheckpointMalformed(format!("bad magic `{magic_line}`")))?
            .parse::<u32>()
            .map_err(|_| Error::CheckpointMalformed("unparseable version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let (len_line, rest) =
            split_line(rest).ok_or_else(|| Error::CheckpointTruncated("missing header length".into()))?;
        let header_len: usize = std::str::from_utf8(len_line)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::CheckpointMalformed("unparseable header length".into()))?;
        if rest.len() < header_len + 1 {
            return Err(Error::CheckpointTruncated(format!(
                "header needs {header_len} bytes, {} available",
                rest.len()
            )));
        }
        let header: CheckpointHeader = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| Error::CheckpointMalformed(format!("header: {e}")))?;
        let body = &rest[header_len + 1..];
        let expected = 4 * header.payload_len;
        if body.len() < expected {
            return Err(Error::CheckpointTruncated(format!(
                "payload needs {expected} bytes, {} available",
                body.len()
            )));
        }
        if body.len() > expected {
            return Err(Error::CheckpointMalformed(format!(
                "{} trailing bytes",
                body.len() - expected
            )));
        }
        for t in &header.tensors {
            let end = t.offset + t.shape.iter().product::<usize>();
            if end > header.payload_len {
                return Err(Error::CheckpointMalformed(format!(
                    "tensor `{}` overruns the payload",
                    t.name
                )));
            }
        }
        let payload = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Checkpoint { header, payload })
    }

    /// Writes via a temporary file and rename, so an interrupted write never
    /// replaces an existing checkpoint with a partial one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn entries(&self, kind: TensorKind) -> impl Iterator<Item = &TensorEntry> {
        self.header.tensors.iter().filter(move |t| t.kind == kind)
    }

    fn slice(&self, e: &TensorEntry) -> &[f32] {
        &self.payload[e.offset..e.offset + e.shape.iter().product::<usize>()]
    }

    /// Copies parameters and running statistics into `model`, checking every
    /// tensor name and shape in order.
    pub fn restore_into<T: Scalar>(&self, model: &mut FesNet<T>) -> Result<()> {
        let params = self.entries(TensorKind::Param).collect::<Vec<_>>();
        let buffers = self.entries(TensorKind::Buffer).collect::<Vec<_>>();
        copy_named(
            &params,
            model.params_mut().into_iter().map(|(n, p)| (n, &mut p.value)).collect(),
            self,
        )?;
        copy_named(&buffers, model.buffers_mut(), self)
    }

    /// Builds the network described by the header and restores its weights.
    pub fn to_model<T: Scalar>(&self) -> Result<FesNet<T>> {
        let mut model = FesNet::new(self.header.model.clone(), &mut seeded(0))?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    /// Optimizer state, when the checkpoint carries it.
    pub fn adam<T: Scalar>(&self) -> Option<Adam<T>> {
        let t = self.header.meta.adam_t?;
        let ms = self.entries(TensorKind::AdamM);
        let vs = self.entries(TensorKind::AdamV);
        let states = ms
            .zip(vs)
            .map(|(m, v)| {
                let mut st = AdamState::new(&m.shape);
                st.m = to_tensor(&m.shape, self.slice(m));
                st.v = to_tensor(&v.shape, self.slice(v));
                st.t = t;
                (m.name.clone(), st)
            })
            .collect();
        Some(Adam { states })
    }
}

fn to_tensor<T: Scalar>(shape: &[usize], data: &[f32]) -> Tensor<T> {
    let data = data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
    Tensor::from_vec(shape, data).expect("entry shape matches slice")
}

fn copy_named<T: Scalar>(
    stored: &[&TensorEntry],
    targets: Vec<(String, &mut Tensor<T>)>,
    ckpt: &Checkpoint,
) -> Result<()> {
    for (i, (name, target)) in targets.into_iter().enumerate() {
        let entry = stored.get(i).ok_or_else(|| Error::CheckpointMissing(name.clone()))?;
        if entry.name != name {
            return Err(Error::CheckpointMalformed(format!(
                "tensor {i} is `{}` in the checkpoint but `{name}` in the model",
                entry.name
            )));
        }
        if entry.shape != target.shape() {
            return Err(Error::CheckpointShape {
                name,
                expected: target.shape().to_vec(),
                found: entry.shape.clone(),
            });
        }
        *target = to_tensor(&entry.shape, ckpt.slice(entry));
    }
    Ok(())
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let pos = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..pos], &bytes[pos + 1..]))
}

pub fn save_checkpoint<T: Scalar>(model: &FesNet<T>, meta: CheckpointMeta, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, meta, None).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<FesNet<T>> {
    Checkpoint::load(path)?.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::rng::seeded;

    fn tiny() -> ModelConfig {
        ModelConfig {
            stem_channels: 4,
            pcb_channels: vec![4, 4, 4, 8],
            head_channels: vec![4, 4],
            feb_channels: vec![4, 4],
            fuse_channels: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_predicts_bitwise_identically() {
        let mut net = FesNet::<f32>::new(tiny(), &mut seeded(3)).unwrap();
        let x = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut seeded(4));
        net.forward(&x, Mode::Train).unwrap();
        let before = net.predict(&x).unwrap();
        let bytes = Checkpoint::from_model(&net, CheckpointMeta::default(), None)
            .to_bytes()
            .unwrap();
        let mut back: FesNet<f32> = Checkpoint::from_bytes(&bytes).unwrap().to_model().unwrap();
        assert_eq!(back.predict(&x).unwrap().data(), before.data());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let net = FesNet::<f32>::new(tiny(), &mut seeded(3)).unwrap();
        let bytes = Checkpoint::from_model(&net, CheckpointMeta::default(), None)
            .to_bytes()
            .unwrap();
        for cut in [5, 30, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::CheckpointTruncated(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let net = FesNet::<f32>::new(tiny(), &mut seeded(3)).unwrap();
        let mut bytes = Checkpoint::from_model(&net, CheckpointMeta::default(), None)
            .to_bytes()
            .unwrap();
        let first = format!("{CHECKPOINT_MAGIC} 1");
        bytes[first.len() - 1] = b'7';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { found: 7, .. }), "{err}");
    }

    #[test]
    fn different_widths_name_the_first_mismatch() {
        let net = FesNet::<f32>::new(tiny(), &mut seeded(3)).unwrap();
        let ckpt = Checkpoint::from_model(&net, CheckpointMeta::default(), None);
        let wider = ModelConfig {
            pcb_channels: vec![4, 4, 8, 8],
            ..tiny()
        };
        let mut other = FesNet::<f32>::new(wider, &mut seeded(3)).unwrap();
        match ckpt.restore_into(&mut other).unwrap_err() {
            Error::CheckpointShape { name, .. } => assert_eq!(name, "pcb3.conv_a.conv.weight"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn optimizer_state_round_trips() {
        let mut net = FesNet::<f32>::new(tiny(), &mut seeded(3)).unwrap();
        let mut adam = Adam::new();
        let x = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut seeded(4));
        let y = net.forward(&x, Mode::Train).unwrap();
        net.backward(&Tensor::ones(y.shape())).unwrap();
        adam.step(&mut net.params_mut(), 1e-3).unwrap();
        let ckpt = Checkpoint::from_model(&net, CheckpointMeta::default(), Some(&adam));
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        let restored: Adam<f32> = back.adam().unwrap();
        assert_eq!(restored.states.len(), adam.states.len());
        assert_eq!(restored.states[5], adam.states[5]);
    }
}
