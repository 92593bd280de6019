use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{read_mask, read_rgb, IMAGE_EXTENSIONS};
use super::{BinaryMask, Sample, Split};
use crate::error::{Error, Result};

/// Which public dataset a root holds; fixes the expected image count and
/// the train/test split rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// 40 images. Stems containing `train`/`test` are split by that token;
    /// otherwise the official numbering applies (01-20 test, 21-40 train).
    Drive,
    /// 20 images: first 10 train, last 10 test.
    Stare,
    /// 28 images: first 20 train, last 8 test.
    Chase,
    /// 45 images in three categories (stem suffix `_h`, `_g`, `_dr`).
    Hrf,
    /// Any count: the first `custom_train` images train, the rest test.
    Custom,
}

impl DatasetKind {
    pub fn expected_count(self) -> Option<usize> {
        match self {
            DatasetKind::Drive => Some(40),
            DatasetKind::Stare => Some(20),
            DatasetKind::Chase => Some(28),
            DatasetKind::Hrf => Some(45),
            DatasetKind::Custom => None,
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "drive" => Ok(DatasetKind::Drive),
            "stare" => Ok(DatasetKind::Stare),
            "chase" | "chasedb1" => Ok(DatasetKind::Chase),
            "hrf" => Ok(DatasetKind::Hrf),
            "custom" => Ok(DatasetKind::Custom),
            other => Err(format!("unknown dataset `{other}` (drive, stare, chase, hrf, custom)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub root: PathBuf,
    /// Annotation directory; point it at a second annotator's masks to
    /// switch ground truth (STARE, CHASE).
    pub mask_dir: String,
    pub roi_dir: String,
    /// HRF: images per category assigned to training.
    pub hrf_train_per_category: usize,
    /// Custom: number of leading images assigned to training.
    pub custom_train: usize,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, root: impl Into<PathBuf>) -> Self {
        DatasetSpec {
            kind,
            root: root.into(),
            mask_dir: "masks".into(),
            roi_dir: "roi".into(),
            hrf_train_per_category: 10,
            custom_train: 0,
        }
    }
}

/// Image files of a directory keyed by stem.
fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::dataset(dir, format!("cannot read directory: {e}")))?;
    for entry in entries {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::dataset(
                &path,
                format!("stem `{stem}` also used by {}", prev.display()),
            ));
        }
    }
    Ok(out)
}

fn assign_splits(spec: &DatasetSpec, stems: &[String]) -> Result<Vec<Split>> {
    let n = stems.len();
    if let Some(expected) = spec.kind.expected_count() {
        if n != expected {
            return Err(Error::dataset(
                &spec.root,
                format!("{:?} has {expected} images, found {n}", spec.kind),
            ));
        }
    }
    let leading = |train: usize| {
        (0..n)
            .map(|i| if i < train { Split::Train } else { Split::Test })
            .collect()
    };
    Ok(match spec.kind {
        DatasetKind::Drive => {
            let tagged: Option<Vec<Split>> = stems
                .iter()
                .map(|s| {
                    let s = s.to_ascii_lowercase();
                    match (s.contains("train"), s.contains("test")) {
                        (true, false) => Some(Split::Train),
                        (false, true) => Some(Split::Test),
                        _ => None,
                    }
                })
                .collect();
            match tagged {
                Some(t) => t,
                None => (0..n)
                    .map(|i| if i < 20 { Split::Test } else { Split::Train })
                    .collect(),
            }
        }
        DatasetKind::Stare => leading(10),
        DatasetKind::Chase => leading(20),
        DatasetKind::Custom => leading(spec.custom_train.min(n)),
        DatasetKind::Hrf => {
            let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
            let mut out = Vec::with_capacity(n);
            for stem in stems {
                let lower = stem.to_ascii_lowercase();
                let cat = ["_dr", "_g", "_h"]
                    .into_iter()
                    .find(|suffix| lower.ends_with(suffix))
                    .ok_or_else(|| {
                        Error::dataset(
                            &spec.root,
                            format!("HRF stem `{stem}` lacks a _h/_g/_dr category suffix"),
                        )
                    })?;
                let k = seen.entry(cat).or_default();
                out.push(if *k < spec.hrf_train_per_category {
                    Split::Train
                } else {
                    Split::Test
                });
                *k += 1;
            }
            out
        }
    })
}

/// Loads every image of a dataset root with its annotations and split.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    if !spec.root.is_dir() {
        return Err(Error::dataset(&spec.root, "dataset root does not exist"));
    }
    let images = list_stems(&spec.root.join("images"))?;
    let masks = list_stems(&spec.root.join(&spec.mask_dir))?;
    let roi_dir = spec.root.join(&spec.roi_dir);
    let rois = if roi_dir.is_dir() {
        Some(list_stems(&roi_dir)?)
    } else {
        None
    };

    for (stem, path) in &images {
        if !masks.contains_key(stem) {
            return Err(Error::dataset(
                path,
                format!("image `{stem}` has no mask in {}/", spec.mask_dir),
            ));
        }
        if let Some(rois) = &rois {
            if !rois.contains_key(stem) {
                return Err(Error::dataset(
                    path,
                    format!("image `{stem}` has no field-of-view mask"),
                ));
            }
        }
    }
    if let Some((stem, path)) = masks.iter().find(|(s, _)| !images.contains_key(*s)) {
        return Err(Error::dataset(path, format!("mask `{stem}` has no matching image")));
    }

    let stems: Vec<String> = images.keys().cloned().collect();
    let splits = assign_splits(spec, &stems)?;
    let mut samples = Vec::with_capacity(stems.len());
    for (stem, split) in stems.into_iter().zip(splits) {
        let image = read_rgb(&images[&stem])?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let mask = read_mask(&masks[&stem])?;
        let check = |m: &BinaryMask, path: &Path| -> Result<()> {
            if m.dims() != (h, w) {
                return Err(Error::dataset(
                    path,
                    format!("extent {}x{} differs from image {h}x{w}", m.height(), m.width()),
                ));
            }
            Ok(())
        };
        check(&mask, &masks[&stem])?;
        let roi = match &rois {
            Some(r) => {
                let m = read_mask(&r[&stem])?;
                check(&m, &r[&stem])?;
                Some(m)
            }
            None => None,
        };
        samples.push(Sample {
            id: stem,
            split,
            image,
            mask,
            roi,
            valid: BinaryMask::ones(h, w),
            original_size: (h, w),
            content_size: (h, w),
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DatasetKind) -> DatasetSpec {
        DatasetSpec::new(kind, "/nonexistent")
    }

    fn stems(names: impl IntoIterator<Item = String>) -> Vec<String> {
        names.into_iter().collect()
    }

    #[test]
    fn drive_numbering_rule() {
        let s = stems((1..=40).map(|i| format!("{i:02}")));
        let splits = assign_splits(&spec(DatasetKind::Drive), &s).unwrap();
        assert_eq!(splits.iter().filter(|&&s| s == Split::Train).count(), 20);
        assert_eq!(splits[0], Split::Test);
        assert_eq!(splits[39], Split::Train);
    }

    #[test]
    fn drive_tagged_names() {
        let s = stems(
            (1..=20)
                .map(|i| format!("{i:02}_test"))
                .chain((21..=40).map(|i| format!("{i}_training"))),
        );
        let splits = assign_splits(&spec(DatasetKind::Drive), &s).unwrap();
        assert!(splits[..20].iter().all(|&s| s == Split::Test));
        assert!(splits[20..].iter().all(|&s| s == Split::Train));
    }

    #[test]
    fn hrf_category_rule() {
        let mut s: Vec<String> = ["dr", "g", "h"]
            .iter()
            .flat_map(|c| (1..=15).map(move |i| format!("{i:02}_{c}")))
            .collect();
        s.sort();
        let splits = assign_splits(&spec(DatasetKind::Hrf), &s).unwrap();
        assert_eq!(splits.iter().filter(|&&s| s == Split::Train).count(), 30);
        let idx = s.iter().position(|x| x == "11_g").unwrap();
        assert_eq!(splits[idx], Split::Test);
    }

    #[test]
    fn wrong_count_is_rejected() {
        let s = stems((0..19).map(|i| i.to_string()));
        let err = assign_splits(&spec(DatasetKind::Stare), &s).unwrap_err();
        assert!(err.to_string().contains("found 19"));
    }
}
