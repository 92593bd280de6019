use std::fs;
use std::path::{Path, PathBuf};

use fesnet_core::data::{AugmentConfig, DatasetKind, DatasetSpec, PreprocessConfig, Split, ZScoreMode};
use fesnet_core::metrics::Aggregation;
use fesnet_core::model::ModelConfig;
use fesnet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// File name of the effective-config echo written next to every output.
pub const CONFIG_ECHO: &str = "config.toml";

/// Flat key-value run description. Every key is optional in the file;
/// command-line flags are applied on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub dataset: DatasetKind,
    pub root: Option<PathBuf>,
    pub mask_dir: String,
    pub roi_dir: String,
    pub hrf_train_per_category: usize,
    pub custom_train: usize,

    /// Output widths of the four prompt convolutional blocks.
    pub channels: Vec<usize>,

    pub lr0: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub crops_per_image: usize,
    pub checkpoint_every: usize,
    pub max_steps: Option<usize>,
    pub augment: bool,
    pub target_width: usize,
    pub pad_multiple: usize,
    pub zscore: ZScoreMode,
    pub seed: u64,

    pub split: Split,
    pub aggregation: Aggregation,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let spec = DatasetSpec::new(DatasetKind::Drive, "");
        CliConfig {
            dataset: spec.kind,
            root: None,
            mask_dir: spec.mask_dir,
            roi_dir: spec.roi_dir,
            hrf_train_per_category: spec.hrf_train_per_category,
            custom_train: spec.custom_train,
            channels: ModelConfig::default().pcb_channels,
            lr0: t.lr0,
            lr_decay: t.lr_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            crop_size: t.crop_size,
            crops_per_image: t.crops_per_image,
            checkpoint_every: t.checkpoint_every,
            max_steps: t.max_steps,
            augment: t.augment.is_some(),
            target_width: t.preprocess.target_width,
            pad_multiple: t.preprocess.multiple,
            zscore: t.preprocess.zscore,
            seed: t.seed,
            split: Split::Test,
            aggregation: Aggregation::GlobalSum,
            checkpoint: None,
            out: None,
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            pcb_channels: self.channels.clone(),
            ..ModelConfig::default()
        }
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            target_width: self.target_width,
            multiple: self.pad_multiple,
            zscore: self.zscore,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            lr_decay: self.lr_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            crop_size: self.crop_size,
            seed: self.seed,
            crops_per_image: self.crops_per_image,
            checkpoint_every: self.checkpoint_every,
            max_steps: self.max_steps,
            augment: self.augment.then(AugmentConfig::default),
            preprocess: self.preprocess(),
        }
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec, CliError> {
        let root = self
            .root
            .clone()
            .ok_or(CliError::Missing("--root (or `root` in the config)"))?;
        Ok(DatasetSpec {
            mask_dir: self.mask_dir.clone(),
            roi_dir: self.roi_dir.clone(),
            hrf_train_per_category: self.hrf_train_per_category,
            custom_train: self.custom_train,
            ..DatasetSpec::new(self.dataset, root)
        })
    }

    /// The model needs extents divisible by its total downsampling.
    pub fn validate(&self) -> Result<(), CliError> {
        let factor = self.model().downsample_factor();
        if self.channels.len() != 4 || self.channels.contains(&0) {
            return Err(CliError::Config(format!(
                "channels must list four positive widths, got {:?}",
                self.channels
            )));
        }
        if self.pad_multiple == 0 || self.pad_multiple % factor != 0 {
            return Err(CliError::Config(format!(
                "pad_multiple must be a multiple of {factor}, got {}",
                self.pad_multiple
            )));
        }
        if self.crop_size % factor != 0 {
            return Err(CliError::Config(format!(
                "crop_size must be a multiple of {factor}, got {}",
                self.crop_size
            )));
        }
        self.train().validate()?;
        Ok(())
    }
}
