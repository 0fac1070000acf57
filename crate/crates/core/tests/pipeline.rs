mod common;

use std::path::PathBuf;

use crackseg::backbones::BackboneKind;
use crackseg::dataset::load_coco;
use crackseg::model::MaskRcnn;
use crackseg::pipeline::{
    evaluate, evaluate_model, infer, infer_model, load_sample, rle_decode, train, Checkpoint, CheckpointError,
    InferRecord, PipelineError, RunConfig, LAST_CHECKPOINT, TRAIN_LOG,
};

fn small_config(epochs: u64) -> RunConfig {
    RunConfig {
        epochs,
        batch_size: 2,
        lr: 0.01,
        seed: 3,
        ..RunConfig::toy(BackboneKind::ResnetFpn)
    }
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic(&dir.path().join("data"), 3, 1, 1);
    let cfg = small_config(2);
    let a = train(&cfg, &data, None, &dir.path().join("a"), None).unwrap();
    let b = train(&cfg, &data, None, &dir.path().join("b"), None).unwrap();
    assert_eq!(a.last, b.last);
    let bytes = |d: &str| std::fs::read(dir.path().join(d).join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(bytes("a"), bytes("b"));
    let losses: Vec<_> = a.log.iter().map(|e| e.losses.clone()).collect();
    assert_eq!(losses, b.log.iter().map(|e| e.losses.clone()).collect::<Vec<_>>());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic(&dir.path().join("data"), 3, 0, 2);
    let full = train(&small_config(3), &data, None, &dir.path().join("full"), None).unwrap();
    let first = train(&small_config(1), &data, None, &dir.path().join("part"), None).unwrap();
    let reloaded = Checkpoint::load(&dir.path().join("part").join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(reloaded, first.last);
    let rest = train(&small_config(3), &data, None, &dir.path().join("part"), Some(reloaded)).unwrap();
    assert_eq!(rest.log.len(), 2);
    assert_eq!(rest.last.epoch, 3);
    assert_eq!(rest.last.params, full.last.params);
    assert_eq!(rest.last.optimizer_state, full.last.optimizer_state);
}

#[test]
fn resume_refuses_other_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic(&dir.path().join("data"), 2, 0, 2);
    let first = train(&small_config(1), &data, None, &dir.path().join("run"), None).unwrap();
    let other = RunConfig {
        lr: 0.02,
        ..small_config(2)
    };
    let err = train(&other, &data, None, &dir.path().join("run"), Some(first.last)).unwrap_err();
    assert!(matches!(err, PipelineError::ConfigMismatch { .. }), "{err}");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic(&dir.path().join("data"), 2, 0, 4);
    let cfg = RunConfig {
        lr: 0.0,
        weight_decay: 0.0,
        ..small_config(2)
    };
    let out = train(&cfg, &data, None, &dir.path().join("run"), None).unwrap();
    let init = MaskRcnn::new(cfg.model_config(), cfg.seed).unwrap();
    assert_eq!(out.last.params, init.params);
}

#[test]
fn divergence_aborts_with_image_ids() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic(&dir.path().join("data"), 2, 0, 5);
    let cfg = RunConfig {
        lr: 1e12,
        grad_clip_norm: 0.0,
        batch_size: 1,
        ..small_config(4)
    };
    match train(&cfg, &data, None, &dir.path().join("run"), None) {
        Err(PipelineError::NonFiniteLoss { image_ids, epoch }) => {
            assert!(!image_ids.is_empty());
            assert!(epoch >= 1);
        }
        other => panic!("expected a non-finite loss abort, got {other:?}"),
    }
}

#[test]
fn log_starts_with_config_and_has_one_line_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic(&dir.path().join("data"), 3, 1, 6);
    let val = common::synthetic(&dir.path().join("val"), 2, 1, 7);
    let out = train(&small_config(2), &data, Some(&val), &dir.path().join("run"), None).unwrap();
    let text = std::fs::read_to_string(dir.path().join("run").join(TRAIN_LOG)).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    let echoed = RunConfig::from_toml_str(lines[0]["config"].as_str().unwrap()).unwrap();
    assert_eq!(echoed, small_config(2));
    assert_eq!(lines[2]["epoch"], 2);
    assert!(lines[1]["val_mask_ap"].is_object());
    assert!(out.best_epoch.is_some());
}

#[test]
fn corrupted_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic(&dir.path().join("data"), 2, 0, 8);
    train(&small_config(1), &data, None, &dir.path().join("run"), None).unwrap();
    let path = dir.path().join("run").join(LAST_CHECKPOINT);
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x80;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Integrity { .. })));
}

#[test]
fn evaluation_ignores_annotation_order() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic(&dir.path().join("data"), 4, 1, 9);
    let cfg = RunConfig {
        score_threshold: 0.05,
        ..small_config(0)
    };
    let model = MaskRcnn::new(cfg.model_config(), 11).unwrap();
    let before = evaluate_model(&model, &data, &cfg, "x").unwrap();

    let mut coco = data.to_coco();
    coco.images.reverse();
    coco.annotations.reverse();
    let path = dir.path().join("data").join("reversed.json");
    std::fs::write(&path, serde_json::to_string(&coco).unwrap()).unwrap();
    let reordered = load_coco(&path, &data.image_root).unwrap();
    let after = evaluate_model(&model, &reordered, &cfg, "x").unwrap();
    assert_eq!(serde_json::to_string(&before).unwrap(), serde_json::to_string(&after).unwrap());
}

#[test]
fn threshold_one_admits_no_detection() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic(&dir.path().join("data"), 3, 1, 10);
    let cfg = RunConfig {
        score_threshold: 1.0,
        ..small_config(0)
    };
    let model = MaskRcnn::new(cfg.model_config(), 12).unwrap();
    let report = evaluate_model(&model, &data, &cfg, "x").unwrap();
    assert_eq!(report.confusion.tp, 0);
    assert_eq!(report.confusion.fp, 0);
    assert_eq!(report.confusion.fn_, 2);
    assert_eq!(report.confusion.tn, 1);
}

#[test]
fn evaluation_uses_checkpoint_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic(&dir.path().join("data"), 2, 0, 13);
    let trained = train(&small_config(1), &data, None, &dir.path().join("run"), None).unwrap();
    // Thresholds come from the caller, the network from the checkpoint.
    let caller = RunConfig::toy(BackboneKind::Hrnet);
    let report = evaluate(&trained.last, &data, &caller, "fpn").unwrap();
    assert_eq!(report.num_images, 2);
}

fn input_images(dir: &std::path::Path, n: usize, crack_free: usize, seed: u64) -> Vec<PathBuf> {
    let data = common::synthetic(dir, n, crack_free, seed);
    data.records().iter().map(|r| data.image_path(r)).collect()
}

#[test]
fn empty_detections_leave_the_image_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let images = input_images(&dir.path().join("data"), 2, 0, 14);
    let cfg = RunConfig {
        score_threshold: 1.0,
        ..small_config(0)
    };
    let model = MaskRcnn::new(cfg.model_config(), 1).unwrap();
    let out = dir.path().join("out");
    let summary = infer_model(&model, &images, &cfg, &out).unwrap();
    assert!(summary.failures.is_empty());
    for ((json, overlay), src) in summary.written.iter().zip(&images) {
        let record: InferRecord = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
        assert!(record.detections.is_empty());
        assert_eq!(image::open(overlay).unwrap().to_rgb8(), image::open(src).unwrap().to_rgb8());
    }
}

#[test]
fn inference_records_decode_to_predicted_masks() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic(&dir.path().join("data"), 2, 0, 15);
    let images: Vec<PathBuf> = data.records().iter().map(|r| data.image_path(r)).collect();
    let cfg = RunConfig {
        score_threshold: 0.05,
        ..small_config(0)
    };
    let model = MaskRcnn::new(cfg.model_config(), 2).unwrap();
    let first = infer_model(&model, &images, &cfg, &dir.path().join("a")).unwrap();
    let second = infer_model(&model, &images, &cfg, &dir.path().join("b")).unwrap();
    let mut detections = 0;
    for (((ja, oa), (jb, ob)), r) in first.written.iter().zip(&second.written).zip(data.records()) {
        assert_eq!(std::fs::read(ja).unwrap(), std::fs::read(jb).unwrap());
        assert_eq!(std::fs::read(oa).unwrap(), std::fs::read(ob).unwrap());
        let record: InferRecord = serde_json::from_str(&std::fs::read_to_string(ja).unwrap()).unwrap();
        let sample = load_sample(&data, r).unwrap();
        let predicted = model.predict(&sample.image, &cfg.predict_config()).unwrap();
        assert_eq!(record.detections.len(), predicted.len());
        for (d, p) in record.detections.iter().zip(&predicted) {
            assert_eq!(rle_decode(&d.mask).unwrap(), p.mask);
            assert_eq!(d.bbox, [p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2]);
            assert_eq!(d.category, "crack");
        }
        detections += predicted.len();
    }
    assert!(detections > 0);
}

#[test]
fn unreadable_images_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let mut images = input_images(&dir.path().join("data"), 2, 0, 16);
    let broken = dir.path().join("broken.png");
    std::fs::write(&broken, b"not an image").unwrap();
    images.insert(1, broken.clone());
    images.push(dir.path().join("missing.png"));
    let cfg = small_config(0);
    let ck = Checkpoint::new(MaskRcnn::new(cfg.model_config(), 3).unwrap().params, Default::default(), 0, &cfg);
    let summary = infer(&ck, &images, &cfg, &dir.path().join("out")).unwrap();
    assert_eq!(summary.written.len(), 2);
    let failed: Vec<_> = summary.failures.iter().map(|(p, _)| p.clone()).collect();
    assert_eq!(failed, vec![broken, dir.path().join("missing.png")]);
}

#[test]
fn clashing_file_stems_get_distinct_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let images = input_images(&dir.path().join("one"), 1, 0, 17);
    let other = input_images(&dir.path().join("two"), 1, 0, 18);
    let all = vec![images[0].clone(), other[0].clone()];
    let cfg = small_config(0);
    let model = MaskRcnn::new(cfg.model_config(), 4).unwrap();
    let summary = infer_model(&model, &all, &cfg, &dir.path().join("out")).unwrap();
    assert_eq!(summary.written.len(), 2);
    assert_ne!(summary.written[0].0, summary.written[1].0);
}
