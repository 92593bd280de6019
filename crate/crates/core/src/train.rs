//! Training loop, learning-rate schedule and evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment, prepare, random_crop, resize_bilinear, AugmentConfig, BinaryMask, PreprocessConfig, Sample, Split,
};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, confusion_counts, render_overlay, write_overlay, Aggregation, ConfusionCounts, MetricReport,
    RocAccumulator,
};
use crate::model::{Checkpoint, CheckpointMeta, FesNet, ModelConfig};
use crate::nn::{cross_entropy_loss, softmax_channels, Adam, Layer, Mode};
use crate::rng::{purpose_stream, sample_stream};
use crate::tensor::Tensor;

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.fckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.fckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
    /// Random crops drawn from each training image per epoch.
    pub crops_per_image: usize,
    /// Save a checkpoint every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    pub preprocess: PreprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2e-5,
            lr_decay: 0.9,
            epochs: 150,
            batch_size: 4,
            crop_size: 320,
            seed: 0,
            crops_per_image: 1,
            checkpoint_every: 10,
            max_steps: None,
            augment: Some(AugmentConfig::default()),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("train_config", msg));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad(format!("lr_decay must be positive, got {}", self.lr_decay));
        }
        if self.batch_size == 0 || self.crop_size == 0 || self.crops_per_image == 0 {
            return bad("batch_size, crop_size and crops_per_image must be at least 1".into());
        }
        Ok(())
    }
}

/// `lr0 * lr_decay^epoch`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi(epoch as i32)
}

/// Fresh model whose weights depend only on `seed`.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<FesNet<f32>> {
    FesNet::new(config, &mut purpose_stream(seed, "init"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_clock_s: f64,
    pub validation: Option<MetricReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Stacks crops into an `n x 3 x s x s` input, an `n x s x s` class target
/// and an `n x s x s` loss mask (valid pixels only).
pub fn make_batch(crops: &[Sample]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let first = crops
        .first()
        .ok_or_else(|| Error::invalid("make_batch", "empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut x = Vec::with_capacity(crops.len() * 3 * h * w);
    let mut t = Vec::with_capacity(crops.len() * h * w);
    let mut m = Vec::with_capacity(crops.len() * h * w);
    for c in crops {
        if (c.height(), c.width()) != (h, w) {
            return Err(Error::invalid(
                "make_batch",
                format!("`{}` is {}x{}, batch is {h}x{w}", c.id, c.height(), c.width()),
            ));
        }
        x.extend_from_slice(c.image.data());
        t.extend(c.mask.data().iter().map(|&v| v as f32));
        m.extend(c.valid.data().iter().map(|&v| v as f32));
    }
    let n = crops.len();
    Ok((
        Tensor::from_vec(&[n, 3, h, w], x)?,
        Tensor::from_vec(&[n, h, w], t)?,
        Tensor::from_vec(&[n, h, w], m)?,
    ))
}

/// One optimizer step on a batch. Returns the loss; parameters and running
/// statistics are left untouched when the loss or any gradient is non-finite.
pub fn train_step(
    model: &mut FesNet<f32>,
    adam: &mut Adam<f32>,
    crops: &[Sample],
    lr: f64,
    step: usize,
) -> Result<f64> {
    let (x, target, mask) = make_batch(crops)?;
    // The train-mode forward pass moves the running statistics before we know
    // whether the step is usable.
    let saved: Vec<Tensor<f32>> = model.buffers().into_iter().map(|(_, b)| b.clone()).collect();
    let result = (|| {
        model.zero_grad();
        let logits = model.forward(&x, Mode::Train)?;
        let probs = softmax_channels(&logits)?;
        let (loss, dlogits) = cross_entropy_loss(&probs, &target, Some(&mask))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        model.backward(&dlogits)?;
        adam.step(&mut model.params_mut(), lr)?;
        Ok(loss as f64)
    })();
    if result.is_err() {
        for ((_, b), s) in model.buffers_mut().into_iter().zip(saved) {
            *b = s;
        }
    }
    result
}

/// Augmented random crops of one sample for one epoch.
fn crops_for(sample: &Sample, cfg: &TrainConfig, epoch: usize, k: usize) -> Result<Sample> {
    let mut rng = sample_stream(cfg.seed, &format!("{}#{k}", sample.id), epoch);
    let s = match &cfg.augment {
        Some(a) => augment(sample, a, &mut rng),
        None => sample.clone(),
    };
    random_crop(&s, cfg.crop_size, &mut rng)
}

fn write_json_line<W: Write, S: Serialize>(w: &mut W, v: &S) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

struct Sinks {
    dir: PathBuf,
    loss: BufWriter<File>,
    epochs: BufWriter<File>,
}

impl Sinks {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Sinks {
            dir: dir.to_path_buf(),
            loss: BufWriter::new(File::create(dir.join(LOSS_LOG))?),
            epochs: BufWriter::new(File::create(dir.join(EPOCH_LOG))?),
        })
    }
}

/// Trains on the train split of `samples` (already resized, padded and
/// normalized). With an output directory, writes the step log, the epoch log
/// and checkpoints there.
///
/// Randomness: the visiting order of an epoch comes from a stream keyed by
/// the epoch, and each crop from a stream keyed by sample and epoch, so the
/// run is a function of the seed and the data alone.
pub fn train(
    cfg: &TrainConfig,
    model: &mut FesNet<f32>,
    samples: &[Sample],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Train).collect();
    if train_set.is_empty() {
        return Err(Error::invalid("train", "dataset has no training samples"));
    }
    let mut sinks = out.map(Sinks::open).transpose()?;
    let mut adam = Adam::new();
    let mut log = TrainLog::default();
    let mut step = 0usize;
    let meta = |epoch: usize, step: usize| CheckpointMeta {
        seed: cfg.seed,
        epoch,
        step,
        target_width: cfg.preprocess.target_width,
        ..CheckpointMeta::default()
    };

    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_schedule(cfg, epoch);
        let mut order: Vec<(usize, usize)> = (0..train_set.len())
            .flat_map(|i| (0..cfg.crops_per_image).map(move |k| (i, k)))
            .collect();
        order.shuffle(&mut purpose_stream(cfg.seed, &format!("order-{epoch}")));

        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let crops: Vec<Sample> = chunk
                .par_iter()
                .map(|&(i, k)| crops_for(train_set[i], cfg, epoch, k))
                .collect::<Result<_>>()?;
            let loss = match train_step(model, &mut adam, &crops, lr, step + 1) {
                Ok(l) => l,
                Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. })) => {
                    // Parameters still hold the last successful update.
                    if let Some(s) = &mut sinks {
                        s.loss.flush()?;
                        Checkpoint::from_model(model, meta(epoch, step), Some(&adam))
                            .save(&s.dir.join(LAST_GOOD_CHECKPOINT))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            step += 1;
            let rec = StepRecord { step, epoch, lr, loss };
            if let Some(s) = &mut sinks {
                write_json_line(&mut s.loss, &rec)?;
            }
            log.steps.push(rec);
            losses.push(loss);
        }
        if losses.is_empty() {
            break 'epochs;
        }
        let rec = EpochRecord {
            epoch,
            steps: losses.len(),
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            lr,
            wall_clock_s: started.elapsed().as_secs_f64(),
            validation: None,
        };
        if let Some(s) = &mut sinks {
            write_json_line(&mut s.epochs, &rec)?;
            s.loss.flush()?;
            s.epochs.flush()?;
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                Checkpoint::from_model(model, meta(epoch + 1, step), Some(&adam))
                    .save(&s.dir.join(format!("epoch_{:04}.fckpt", epoch + 1)))?;
            }
        }
        log.epochs.push(rec);
    }

    let last_epoch = log.epochs.last().map_or(0, |e| e.epoch + 1);
    let checkpoint = Checkpoint::from_model(model, meta(last_epoch, step), Some(&adam));
    if let Some(s) = &mut sinks {
        s.loss.flush()?;
        s.epochs.flush()?;
        checkpoint.save(&s.dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

/// Anything that maps a `3 x h x w` image to `2 x h x w` class probabilities.
pub trait Predictor {
    fn predict_probs(&mut self, image: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Predictor for FesNet<f32> {
    fn predict_probs(&mut self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = image.shape().to_vec();
        let x = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
        let p = self.predict(&x)?;
        let ps = p.shape().to_vec();
        p.reshape(&ps[1..])
    }
}

/// Vessel where the vessel probability beats the background probability.
pub fn binarize(probs: &Tensor<f32>) -> Result<BinaryMask> {
    let [c, h, w] = probs.shape()[..] else {
        return Err(Error::shape("binarize", "rank", 3, probs.ndim()));
    };
    if c != 2 {
        return Err(Error::shape("binarize", "channels", 2, c));
    }
    let (bg, fg) = probs.data().split_at(h * w);
    BinaryMask::new(h, w, bg.iter().zip(fg).map(|(b, f)| u8::from(f > b)).collect())
}

/// Runs a raw `3 x h x w` image through preprocessing and the predictor and
/// maps the probabilities back onto the original pixel grid: the pad is cut
/// off and the content resized to `h x w`. Bilinear weights are convex, so
/// the channels still sum to one.
pub fn predict_full<P: Predictor + ?Sized>(
    predictor: &mut P,
    image: &Tensor<f32>,
    cfg: &PreprocessConfig,
) -> Result<(Tensor<f32>, BinaryMask)> {
    let [_, h, w] = image.shape()[..] else {
        return Err(Error::shape("predict_full", "rank", 3, image.ndim()));
    };
    let sample = Sample {
        id: String::new(),
        split: Split::Test,
        image: image.clone(),
        mask: BinaryMask::zeros(h, w),
        roi: None,
        valid: BinaryMask::ones(h, w),
        original_size: (h, w),
        content_size: (h, w),
    };
    let prepared = prepare(&sample, cfg)?;
    let probs = predictor.predict_probs(&prepared.image)?;
    let (ph, pw) = (prepared.height(), prepared.width());
    let (ch, cw) = prepared.content_size;
    let c = probs.shape()[0];
    let mut content = Vec::with_capacity(c * ch * cw);
    for plane in probs.data().chunks(ph * pw) {
        for row in plane.chunks(pw).take(ch) {
            content.extend_from_slice(&row[..cw]);
        }
    }
    let content = Tensor::from_vec(&[c, ch, cw], content)?;
    let full = if (ch, cw) == (h, w) {
        content
    } else {
        resize_bilinear(&content, h, w)
    };
    let mask = binarize(&full)?;
    Ok((full, mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub per_image: Vec<(String, ConfusionCounts)>,
    pub aggregation: Aggregation,
}

/// Scores every sample of `split` over its evaluation region. Writes one
/// overlay per image when `overlay_dir` is given.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &mut P,
    samples: &[Sample],
    split: Split,
    aggregation: Aggregation,
    overlay_dir: Option<&Path>,
) -> Result<EvalOutcome> {
    let mut per_image = Vec::new();
    let mut roc = RocAccumulator::new();
    for s in samples.iter().filter(|s| s.split == split) {
        let probs = predictor.predict_probs(&s.image)?;
        let pred = binarize(&probs)?;
        let region = s.eval_region();
        per_image.push((s.id.clone(), confusion_counts(&pred, &s.mask, Some(&region))?));
        roc.add(&probs.data()[s.height() * s.width()..], &s.mask, Some(&region))?;
        if let Some(dir) = overlay_dir {
            let (ch, cw) = s.content_size;
            let img = render_overlay(&pred.crop(0, 0, ch, cw), &s.mask.crop(0, 0, ch, cw))?;
            write_overlay(dir, &s.id, &img)?;
        }
    }
    if per_image.is_empty() {
        return Err(Error::invalid("evaluate", format!("no samples in the {split} split")));
    }
    let counts: Vec<ConfusionCounts> = per_image.iter().map(|(_, c)| *c).collect();
    let mut report = aggregate(&counts, aggregation)?;
    report.roc_auc = roc.auc();
    Ok(EvalOutcome {
        report,
        per_image,
        aggregation,
    })
}
