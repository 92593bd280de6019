//! Fundus dataset ingestion, preprocessing, and augmentation.
//!
//! On-disk layout for every dataset:
//!
//! ```text
//! <root>/images/<stem>.png   RGB fundus image (PNG or binary PPM/PGM)
//! <root>/masks/<stem>.png    vessel annotation, > 127 is vessel
//! <root>/roi/<stem>.png      optional field-of-view mask
//! ```
//!
//! Files are paired by identical stem and ordered lexicographically.

mod dataset;
mod io;
mod mask;
pub mod synthetic;
mod transform;

pub use dataset::{load_dataset, DatasetKind, DatasetSpec};
pub use io::{read_mask, read_rgb, write_mask_png, write_rgb_png, IMAGE_EXTENSIONS};
pub use mask::BinaryMask;
pub use synthetic::{synthetic_fundus, write_synthetic_dataset};
pub use transform::{
    augment, flip_horizontal, flip_vertical, normalize_sample, prepare, random_crop, resize_and_pad, resize_bilinear,
    rotate, zscore_normalize, AugmentConfig, PreprocessConfig, ZScoreMode, STD_FLOOR,
};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const DEFAULT_TARGET_WIDTH: usize = 640;
pub const DEFAULT_PAD_MULTIPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train or test)")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One annotated fundus image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    /// `3 x h x w`; 0-255 on load, z-scored after [`prepare`].
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
    pub roi: Option<BinaryMask>,
    /// Pixels that carry real image content (not padding or rotation fill).
    pub valid: BinaryMask,
    /// `(height, width)` of the file on disk.
    pub original_size: (usize, usize),
    /// `(height, width)` after resizing, before padding.
    pub content_size: (usize, usize),
}

impl Sample {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// Pixels scored by evaluation: the field of view when one exists,
    /// always restricted to valid (unpadded) content.
    pub fn eval_region(&self) -> BinaryMask {
        match &self.roi {
            Some(roi) => self.valid.and(roi),
            None => self.valid.clone(),
        }
    }

    /// Checks that image, mask, roi and valid region agree in extent.
    pub fn check_consistent(&self) -> crate::Result<()> {
        let (h, w) = (self.height(), self.width());
        let img = self.image.shape();
        let mut bad = img.len() != 3 || img[1] != h || img[2] != w || self.valid.dims() != (h, w);
        if let Some(roi) = &self.roi {
            bad |= roi.dims() != (h, w);
        }
        if bad {
            return Err(crate::Error::invalid(
                "sample",
                format!("`{}`: image {img:?} and masks {h}x{w} disagree", self.id),
            ));
        }
        Ok(())
    }
}
