use std::fmt;

use crate::nn::Layer;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamRow {
    /// Layer path, e.g. `pcb2.down.conv`.
    pub layer: String,
    pub trainable: usize,
    pub buffers: usize,
}

/// Per-layer parameter table; trainable scalars and running statistics are
/// counted separately.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
    pub total_trainable: usize,
    pub total_buffers: usize,
}

impl ParamTable {
    /// Size of a checkpoint payload holding every trainable and buffer
    /// scalar as a 32-bit float.
    pub fn payload_bytes(&self) -> usize {
        4 * (self.total_trainable + self.total_buffers)
    }
}

fn layer_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(layer, _)| layer)
}

/// Counts every trainable scalar (weights, biases, batch-norm gamma/beta).
pub fn count_parameters<T: Scalar, L: Layer<T> + ?Sized>(model: &L) -> ParamTable {
    let mut rows: Vec<ParamRow> = Vec::new();
    let row_for = |rows: &mut Vec<ParamRow>, layer: &str| -> usize {
        if rows.last().is_none_or(|r| r.layer != layer) {
            rows.push(ParamRow {
                layer: layer.to_string(),
                trainable: 0,
                buffers: 0,
            });
        }
        rows.len() - 1
    };
    for (name, p) in model.params() {
        let i = row_for(&mut rows, layer_of(&name));
        rows[i].trainable += p.value.len();
    }
    for (name, b) in model.buffers() {
        let layer = layer_of(&name);
        match rows.iter_mut().find(|r| r.layer == layer) {
            Some(r) => r.buffers += b.len(),
            None => {
                let i = row_for(&mut rows, layer);
                rows[i].buffers += b.len();
            }
        }
    }
    let total_trainable = rows.iter().map(|r| r.trainable).sum();
    let total_buffers = rows.iter().map(|r| r.buffers).sum();
    ParamTable {
        rows,
        total_trainable,
        total_buffers,
    }
}

impl fmt::Display for ParamTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>12}  {:>10}", "layer", "trainable", "buffers")?;
        for r in &self.rows {
            writeln!(f, "{:<width$}  {:>12}  {:>10}", r.layer, r.trainable, r.buffers)?;
        }
        writeln!(
            f,
            "{:<width$}  {:>12}  {:>10}",
            "total", self.total_trainable, self.total_buffers
        )?;
        write!(
            f,
            "trainable: {:.3} M params, float32 payload: {:.2} MB",
            self.total_trainable as f64 / 1e6,
            self.payload_bytes() as f64 / 1e6
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FesNet, ModelConfig};
    use crate::nn::{Conv2d, ConvSpec};
    use crate::rng::seeded;

    #[test]
    fn single_conv() {
        let conv = Conv2d::<f32>::new(ConvSpec::same(3, 16, 3), &mut seeded(0)).unwrap();
        let t = count_parameters(&conv);
        assert_eq!(t.total_trainable, 448);
        assert_eq!(t.total_buffers, 0);
    }

    #[test]
    fn size_invariant_and_grouped() {
        let net = FesNet::<f32>::new(ModelConfig::default(), &mut seeded(0)).unwrap();
        let t = count_parameters(&net);
        assert!(t.rows.iter().any(|r| r.layer == "pcb1.conv_b.conv.depthwise"));
        let bn = t.rows.iter().find(|r| r.layer == "stem.bn").unwrap();
        assert_eq!((bn.trainable, bn.buffers), (32, 32));
        assert!(t.to_string().contains("total"));
    }
}
