use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use fesnet_core::data::{load_dataset, prepare, read_rgb, write_mask_png, PreprocessConfig, Sample};
use fesnet_core::metrics::{format_key_values, format_table};
use fesnet_core::model::{count_parameters, Checkpoint, FesNet};
use fesnet_core::train::{self, init_model, predict_full};
use fesnet_core::verify::run_suite;
use fesnet_core::Tensor;
use npyz::WriterBuilder;
use rayon::prelude::*;

use crate::config::{CliConfig, CONFIG_ECHO};
use crate::CliError;

pub const METRICS_TABLE: &str = "metrics.txt";
pub const METRICS_KV: &str = "metrics.kv";
pub const PER_IMAGE: &str = "per_image.txt";
pub const OVERLAY_DIR: &str = "overlays";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn out_dir(cfg: &CliConfig) -> Result<&Path, CliError> {
    cfg.out
        .as_deref()
        .ok_or(CliError::Missing("--out (or `out` in the config)"))
}

/// Refuses a directory that already has entries unless forced. Nothing is
/// created here so a later failure leaves the filesystem as it was.
fn check_out(dir: &Path, force: bool) -> Result<(), CliError> {
    let mut entries = match fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(dir)(e)),
    };
    if !force && entries.next().is_some() {
        return Err(CliError::OutputNotEmpty(dir.to_path_buf()));
    }
    Ok(())
}

fn create_out(dir: &Path, cfg: &CliConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(&dir.join(CONFIG_ECHO), &cfg.to_toml())
}

fn prepared_dataset(cfg: &CliConfig, preprocess: &PreprocessConfig) -> Result<Vec<Sample>, CliError> {
    let raw = load_dataset(&cfg.dataset_spec()?)?;
    Ok(raw
        .par_iter()
        .map(|s| prepare(s, preprocess))
        .collect::<fesnet_core::Result<_>>()?)
}

fn load_model(cfg: &CliConfig) -> Result<(FesNet<f32>, Checkpoint), CliError> {
    let path = cfg.checkpoint.as_deref().ok_or(CliError::Missing("--checkpoint"))?;
    let ck = Checkpoint::load(path)?;
    Ok((ck.to_model()?, ck))
}

/// Inference geometry: the width the checkpoint was trained at, the rest from the config.
fn inference_preprocess(cfg: &CliConfig, ck: &Checkpoint) -> PreprocessConfig {
    PreprocessConfig {
        target_width: ck.header.meta.target_width,
        ..cfg.preprocess()
    }
}

pub fn train(cfg: &CliConfig, force: bool) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    check_out(dir, force)?;
    let samples = prepared_dataset(cfg, &cfg.preprocess())?;
    let mut model = init_model(cfg.model(), cfg.seed)?;
    create_out(dir, cfg)?;
    let outcome = train::train(&cfg.train(), &mut model, &samples, Some(dir))?;
    let last = outcome.log.epochs.last();
    println!(
        "trained {} steps over {} epochs; final mean loss {}",
        outcome.log.steps.len(),
        outcome.log.epochs.len(),
        last.map_or_else(|| "n/a".into(), |e| format!("{:.6}", e.mean_loss))
    );
    println!("wrote {}", dir.join(train::FINAL_CHECKPOINT).display());
    Ok(())
}

pub fn evaluate(cfg: &CliConfig, force: bool) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    check_out(dir, force)?;
    let (mut model, ck) = load_model(cfg)?;
    let samples = prepared_dataset(cfg, &inference_preprocess(cfg, &ck))?;
    create_out(dir, cfg)?;
    let overlays = dir.join(OVERLAY_DIR);
    fs::create_dir_all(&overlays).map_err(io_err(&overlays))?;
    let outcome = train::evaluate(&mut model, &samples, cfg.split, cfg.aggregation, Some(&overlays))?;

    let images = outcome.per_image.len();
    let name = format!("{:?}-{}", cfg.dataset, cfg.split).to_lowercase();
    let table = format_table(&[(name, images, outcome.report)], outcome.aggregation);
    write(&dir.join(METRICS_TABLE), &table)?;
    write(
        &dir.join(METRICS_KV),
        &format_key_values(&outcome.report, images, outcome.aggregation),
    )?;
    let mut per_image = String::from("id\ttp\ttn\tfp\tfn\n");
    for (id, c) in &outcome.per_image {
        per_image.push_str(&format!("{id}\t{}\t{}\t{}\t{}\n", c.tp, c.tn, c.fp, c.fn_));
    }
    write(&dir.join(PER_IMAGE), &per_image)?;
    print!("{table}");
    Ok(())
}

fn file_stem(path: &Path) -> Result<String, CliError> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::Failed(format!("{}: no usable file name", path.display())))
}

/// Writes a `c x h x w` float tensor as a little-endian `.npy` array.
fn write_npy(path: &Path, t: &Tensor<f32>) -> Result<(), CliError> {
    let shape: Vec<u64> = t.shape().iter().map(|&d| d as u64).collect();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = npyz::WriteOptions::new()
        .default_dtype()
        .shape(&shape)
        .writer(BufWriter::new(file))
        .begin_nd()
        .map_err(io_err(path))?;
    w.extend(t.data().iter().copied()).map_err(io_err(path))?;
    w.finish().map_err(io_err(path))
}

pub fn predict(cfg: &CliConfig, images: &[PathBuf], force: bool) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    check_out(dir, force)?;
    let (mut model, ck) = load_model(cfg)?;
    let preprocess = inference_preprocess(cfg, &ck);
    // Read everything first so an unreadable image leaves no outputs.
    let mut inputs = Vec::with_capacity(images.len());
    for path in images {
        inputs.push((file_stem(path)?, read_rgb(path)?));
    }
    create_out(dir, cfg)?;
    for (stem, image) in &inputs {
        let (probs, mask) = predict_full(&mut model, image, &preprocess)?;
        let mask_path = dir.join(format!("{stem}_mask.png"));
        write_mask_png(&mask_path, &mask)?;
        write_npy(&dir.join(format!("{stem}_probs.npy")), &probs)?;
        println!(
            "{}: {} vessel pixels of {}",
            mask_path.display(),
            mask.count_ones(),
            mask.data().len()
        );
    }
    Ok(())
}

pub fn gradcheck(cfg: &CliConfig) -> Result<(), CliError> {
    let entries = run_suite(cfg.seed)?;
    let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
    let mut failed = 0;
    for e in &entries {
        let verdict = if e.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<width$}  max rel. error {:.3e}  raw {:.3e}  (tolerance {:.0e}, {} coordinates, {} refined)  {verdict}",
            e.name, e.report.max_rel_error, e.report.max_raw_error, e.tolerance, e.report.checked, e.report.refined
        );
        if !e.passed() {
            println!("    worst coordinate: {}", e.report.worst);
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::Failed(format!(
            "{failed} of {} gradient checks failed",
            entries.len()
        )));
    }
    println!("all {} gradient checks passed", entries.len());
    Ok(())
}

pub fn params(cfg: &CliConfig) -> Result<(), CliError> {
    let model = init_model(cfg.model(), cfg.seed)?;
    println!("{}", count_parameters(&model));
    Ok(())
}
