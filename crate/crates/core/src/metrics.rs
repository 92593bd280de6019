//! Pixel-level segmentation metrics, aggregation and TP/FP/FN overlays.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::BinaryMask;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Counts with prediction and ground truth exchanged.
    pub fn swapped(&self) -> Self {
        ConfusionCounts {
            fp: self.fn_,
            fn_: self.fp,
            ..*self
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts::new(self.tp + o.tp, self.tn + o.tn, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

fn check_dims(op: &str, a: &BinaryMask, b: &BinaryMask, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Metric(format!(
            "{op}: {what} is {}x{} but prediction is {}x{}",
            b.height(),
            b.width(),
            a.height(),
            a.width()
        )));
    }
    Ok(())
}

/// Exact counts over the pixels selected by `roi` (all pixels when `None`).
pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask, roi: Option<&BinaryMask>) -> Result<ConfusionCounts> {
    check_dims("confusion_counts", pred, gt, "ground truth")?;
    if let Some(r) = roi {
        check_dims("confusion_counts", pred, r, "region")?;
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if roi.is_some_and(|r| r.data()[i] == 0) {
            continue;
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Metrics are `None` when their denominator is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub counts: ConfusionCounts,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub acc: Option<f64>,
    /// Threshold-point score `1 - (FPR + FNR) / 2`, not a ROC integral.
    pub auc_balanced: Option<f64>,
    pub f1: Option<f64>,
    /// Area under the ROC curve of the probability map, when one was recorded.
    pub roc_auc: Option<f64>,
}

pub fn compute_metrics(c: ConfusionCounts) -> MetricReport {
    let fpr = ratio(c.fp, c.fp + c.tn);
    let fnr = ratio(c.fn_, c.fn_ + c.tp);
    MetricReport {
        counts: c,
        se: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
        acc: ratio(c.tp + c.tn, c.total()),
        auc_balanced: fpr.zip(fnr).map(|(a, b)| 1.0 - 0.5 * (a + b)),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        roc_auc: None,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Sum counts over images, then compute metrics once.
    #[default]
    GlobalSum,
    /// Mean of per-image metrics, skipping images where a metric is undefined.
    PerImageMean,
}

impl Aggregation {
    pub fn label(self) -> &'static str {
        match self {
            Aggregation::GlobalSum => "global-sum",
            Aggregation::PerImageMean => "per-image-mean",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "global-sum" | "global" => Ok(Aggregation::GlobalSum),
            "per-image-mean" | "mean" => Ok(Aggregation::PerImageMean),
            other => Err(format!("unknown aggregation `{other}` (global-sum, per-image-mean)")),
        }
    }
}

pub fn aggregate(counts: &[ConfusionCounts], mode: Aggregation) -> Result<MetricReport> {
    if counts.is_empty() {
        return Err(Error::Metric("aggregate: no images to aggregate".into()));
    }
    let total: ConfusionCounts = counts.iter().copied().sum();
    Ok(match mode {
        Aggregation::GlobalSum => compute_metrics(total),
        Aggregation::PerImageMean => {
            let per: Vec<MetricReport> = counts.iter().map(|&c| compute_metrics(c)).collect();
            let mean = |f: fn(&MetricReport) -> Option<f64>| {
                let v: Vec<f64> = per.iter().filter_map(f).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            MetricReport {
                counts: total,
                se: mean(|r| r.se),
                sp: mean(|r| r.sp),
                acc: mean(|r| r.acc),
                auc_balanced: mean(|r| r.auc_balanced),
                f1: mean(|r| r.f1),
                roc_auc: None,
            }
        }
    })
}

pub const ROC_BINS: usize = 256;

/// Histogram of vessel probabilities split by ground truth; yields a
/// trapezoidal ROC area over `ROC_BINS` thresholds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RocAccumulator {
    pos: Vec<u64>,
    neg: Vec<u64>,
}

impl Default for RocAccumulator {
    fn default() -> Self {
        RocAccumulator {
            pos: vec![0; ROC_BINS],
            neg: vec![0; ROC_BINS],
        }
    }
}

impl RocAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// `probs` holds the vessel probability per pixel, row-major over `gt`.
    pub fn add(&mut self, probs: &[f32], gt: &BinaryMask, roi: Option<&BinaryMask>) -> Result<()> {
        if probs.len() != gt.data().len() {
            return Err(Error::Metric(format!(
                "roc: {} probabilities for a {}x{} mask",
                probs.len(),
                gt.height(),
                gt.width()
            )));
        }
        for (i, (&p, &g)) in probs.iter().zip(gt.data()).enumerate() {
            if roi.is_some_and(|r| r.data()[i] == 0) {
                continue;
            }
            let bin = ((p.clamp(0.0, 1.0) * ROC_BINS as f32) as usize).min(ROC_BINS - 1);
            if g == 1 {
                self.pos[bin] += 1;
            } else {
                self.neg[bin] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &RocAccumulator) {
        for (a, b) in self.pos.iter_mut().zip(&other.pos) {
            *a += b;
        }
        for (a, b) in self.neg.iter_mut().zip(&other.neg) {
            *a += b;
        }
    }

    pub fn auc(&self) -> Option<f64> {
        let (np, nn): (u64, u64) = (self.pos.iter().sum(), self.neg.iter().sum());
        if np == 0 || nn == 0 {
            return None;
        }
        // Sweep the threshold downward from above the top bin.
        let (mut tp, mut fp, mut area) = (0u64, 0u64, 0.0f64);
        for b in (0..ROC_BINS).rev() {
            let (tp1, fp1) = (tp + self.pos[b], fp + self.neg[b]);
            area += (fp1 - fp) as f64 * (tp + tp1) as f64 / 2.0;
            (tp, fp) = (tp1, fp1);
        }
        Some(area / (np as f64 * nn as f64))
    }
}

pub const OVERLAY_TP: [u8; 3] = [0, 255, 0];
pub const OVERLAY_FP: [u8; 3] = [255, 0, 0];
pub const OVERLAY_FN: [u8; 3] = [0, 0, 255];
pub const OVERLAY_TN: [u8; 3] = [0, 0, 0];

/// TP green, FP red, FN blue, TN black.
pub fn render_overlay(pred: &BinaryMask, gt: &BinaryMask) -> Result<RgbImage> {
    check_dims("render_overlay", pred, gt, "ground truth")?;
    Ok(RgbImage::from_fn(pred.width() as u32, pred.height() as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        Rgb(match (pred.get(y, x), gt.get(y, x)) {
            (1, 1) => OVERLAY_TP,
            (1, 0) => OVERLAY_FP,
            (0, 1) => OVERLAY_FN,
            _ => OVERLAY_TN,
        })
    }))
}

/// Writes `<dir>/<id>_overlay.png`.
pub fn write_overlay(dir: &Path, id: &str, overlay: &RgbImage) -> Result<std::path::PathBuf> {
    let path = dir.join(format!("{id}_overlay.png"));
    overlay.save(&path).map_err(|source| Error::Image {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Pixel count per overlay color, as `(tp, tn, fp, fn)` counts.
pub fn overlay_histogram(img: &RgbImage) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for px in img.pixels() {
        match px.0 {
            OVERLAY_TP => c.tp += 1,
            OVERLAY_FP => c.fp += 1,
            OVERLAY_FN => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    c
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", v * 100.0))
}

/// Fixed-width table, metrics in percent with two decimals.
pub fn format_table(rows: &[(String, usize, MetricReport)], mode: Aggregation) -> String {
    let mut s = format!(
        "{:<16} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "run", "images", "Se", "Sp", "Acc", "AUC-bal", "ROC-AUC", "F1"
    );
    for (name, n, r) in rows {
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            name,
            n,
            pct(r.se),
            pct(r.sp),
            pct(r.acc),
            pct(r.auc_balanced),
            pct(r.roc_auc),
            pct(r.f1)
        );
    }
    let _ = writeln!(s, "aggregation: {}", mode.label());
    s
}

/// One `key=value` line per field; undefined metrics are written as `nan`.
pub fn format_key_values(report: &MetricReport, images: usize, mode: Aggregation) -> String {
    let v = |x: Option<f64>| x.map_or_else(|| "nan".to_string(), |x| format!("{x:.10}"));
    let c = report.counts;
    format!(
        "aggregation={}\nimages={images}\ntp={}\ntn={}\nfp={}\nfn={}\nse={}\nsp={}\nacc={}\nauc_balanced={}\nroc_auc={}\nf1={}\n",
        mode.label(),
        c.tp,
        c.tn,
        c.fp,
        c.fn_,
        v(report.se),
        v(report.sp),
        v(report.acc),
        v(report.auc_balanced),
        v(report.roc_auc),
        v(report.f1)
    )
}
