use std::fs;

use fesnet_core::data::{
    load_dataset, prepare, synthetic_fundus, write_synthetic_dataset, DatasetKind, DatasetSpec, PreprocessConfig, Split,
};
use fesnet_core::metrics::{aggregate, Aggregation};
use fesnet_core::model::{Checkpoint, ModelConfig};
use fesnet_core::train::{
    evaluate, init_model, lr_schedule, train, StepRecord, TrainConfig, EPOCH_LOG, FINAL_CHECKPOINT,
    LAST_GOOD_CHECKPOINT, LOSS_LOG,
};
use fesnet_core::Error;

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 2,
        crop_size: 32,
        seed,
        checkpoint_every: 2,
        preprocess: PreprocessConfig {
            target_width: 48,
            ..PreprocessConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn missing_mask_names_the_orphan_image() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), DatasetKind::Stare, 16, 16, 0).unwrap();
    fs::remove_file(dir.path().join("masks/im0007.png")).unwrap();
    let err = load_dataset(&DatasetSpec::new(DatasetKind::Stare, dir.path())).unwrap_err();
    assert!(err.to_string().contains("im0007"), "{err}");
}

#[test]
fn orphan_mask_and_wrong_count_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), DatasetKind::Stare, 16, 16, 0).unwrap();
    fs::remove_file(dir.path().join("images/im0003.png")).unwrap();
    let err = load_dataset(&DatasetSpec::new(DatasetKind::Stare, dir.path())).unwrap_err();
    assert!(err.to_string().contains("im0003"), "{err}");

    fs::remove_file(dir.path().join("masks/im0003.png")).unwrap();
    fs::remove_file(dir.path().join("roi/im0003.png")).unwrap();
    let err = load_dataset(&DatasetSpec::new(DatasetKind::Stare, dir.path())).unwrap_err();
    assert!(err.to_string().contains("found 19"), "{err}");
}

#[test]
fn alternate_annotation_directory() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), DatasetKind::Stare, 16, 16, 0).unwrap();
    fs::rename(dir.path().join("masks"), dir.path().join("masks_ah")).unwrap();
    let spec = DatasetSpec {
        mask_dir: "masks_ah".into(),
        ..DatasetSpec::new(DatasetKind::Stare, dir.path())
    };
    assert_eq!(load_dataset(&spec).unwrap().len(), 20);
}

#[test]
fn drive_geometry_resizes_to_640_by_672() {
    let s = synthetic_fundus("drive", 584, 565, 0);
    let p = prepare(&s, &PreprocessConfig::default()).unwrap();
    assert_eq!((p.height(), p.width()), (672, 640));
    assert_eq!(p.content_size, (662, 640));
    assert_eq!(p.original_size, (584, 565));
}

#[test]
fn training_writes_logs_checkpoints_and_follows_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(3);
    let samples: Vec<_> = (0..3)
        .map(|i| prepare(&synthetic_fundus(&format!("s{i}"), 40, 48, 1), &cfg.preprocess).unwrap())
        .collect();
    let mut model = init_model(ModelConfig::default(), cfg.seed).unwrap();
    let out = train(&cfg, &mut model, &samples, Some(dir.path())).unwrap();

    let lines = fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
    let records: Vec<StepRecord> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records, out.log.steps);
    assert_eq!(records.len(), 3 * 2);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.step, i + 1);
        assert_eq!(r.lr, lr_schedule(&cfg, r.epoch));
    }
    assert_eq!(
        fs::read_to_string(dir.path().join(EPOCH_LOG)).unwrap().lines().count(),
        3
    );
    assert!(dir.path().join("epoch_0002.fckpt").exists());
    let ck = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(ck.header.meta.step, 6);
    assert_eq!(ck.header.meta.epoch, 3);
    assert_eq!(ck.adam::<f32>().unwrap().states[0].1.t, 6);
}

#[test]
fn non_finite_input_aborts_and_keeps_last_good() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(4);
    let mut s = prepare(&synthetic_fundus("nan", 40, 48, 1), &cfg.preprocess).unwrap();
    s.image.data_mut().fill(f32::NAN);
    let mut model = init_model(ModelConfig::default(), 4).unwrap();
    let before = Checkpoint::from_model(&model, Default::default(), None).payload;
    let err = train(&cfg, &mut model, &[s], Some(dir.path())).err().unwrap();
    // ReLU discards NaN activations, so the first casualty may be the loss or
    // the stem gradient; either must stop training at step 1.
    assert!(
        matches!(err, Error::NonFiniteLoss { step: 1 } | Error::NonFiniteGradient { .. }),
        "{err}"
    );
    let kept = Checkpoint::load(&dir.path().join(LAST_GOOD_CHECKPOINT)).unwrap();
    let n = before.len();
    assert_eq!(kept.payload[..n], before[..]);
    assert!(!dir.path().join(FINAL_CHECKPOINT).exists());
}

#[test]
fn evaluation_reads_only_the_requested_split_and_writes_overlays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(5);
    let mut samples: Vec<_> = (0..4)
        .map(|i| prepare(&synthetic_fundus(&format!("e{i}"), 40, 48, 1), &cfg.preprocess).unwrap())
        .collect();
    samples[2].split = Split::Test;
    samples[3].split = Split::Test;
    let mut model = init_model(ModelConfig::default(), 5).unwrap();
    let a = evaluate(
        &mut model,
        &samples,
        Split::Test,
        Aggregation::GlobalSum,
        Some(dir.path()),
    )
    .unwrap();
    let b = evaluate(&mut model, &samples, Split::Test, Aggregation::GlobalSum, None).unwrap();
    assert_eq!(a, b);
    let ids: Vec<_> = a.per_image.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(ids, ["e2", "e3"]);
    assert!(dir.path().join("e2_overlay.png").exists());
    assert!(!dir.path().join("e0_overlay.png").exists());
    let counts: Vec<_> = a.per_image.iter().map(|(_, c)| *c).collect();
    assert_eq!(aggregate(&counts, Aggregation::GlobalSum).unwrap().se, a.report.se);
    // Overlays cover the unpadded content only.
    let img = image::open(dir.path().join("e2_overlay.png")).unwrap();
    assert_eq!((img.height(), img.width()), (40, 48));
}

#[test]
fn checkpoint_rejects_corruption() {
    let model = init_model(ModelConfig::default(), 6).unwrap();
    let bytes = Checkpoint::from_model(&model, Default::default(), None)
        .to_bytes()
        .unwrap();
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::CheckpointTruncated(_))
    ));
    let mut wrong = bytes.clone();
    let v = wrong.iter().position(|&b| b == b'1').unwrap();
    wrong[v] = b'9';
    assert!(matches!(
        Checkpoint::from_bytes(&wrong),
        Err(Error::CheckpointVersion { .. })
    ));
}
