//! Network assembly, parameter accounting, and checkpoints.

mod blocks;
pub mod checkpoint;
mod fesnet;
mod params;

pub use blocks::{up_block, ConvBnRelu, FebBlock, PcbBlock, PcbOutput, PcbWiring, UpBlock, FEB_MAX_CHANNELS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use fesnet::{Features, FesNet, FuseHead, ModelConfig};
pub use params::{count_parameters, ParamRow, ParamTable};
