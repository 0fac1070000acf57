use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{load_sample, Checkpoint, PipelineError, RunConfig};
use crate::dataset::DatasetSplit;
use crate::heads::PredictConfig;
use crate::metrics::{
    coco_ap, confusion, prf_accuracy, ApReport, ApVariant, ConfusionCounts, EvalImage, EvalReport, GroundTruth,
    MetricsError, SceneBreakdown, ScoredInstance,
};
use crate::model::MaskRcnn;

/// Detections down to this score (or the configured threshold, if lower)
/// enter the AP computation so that precision/recall curves extend past
/// the operating point. The image-level counts use the configured
/// threshold.
pub const AP_SCORE_FLOOR: f64 = 0.05;

/// Evaluates a checkpoint. The architecture comes from the checkpoint and
/// the thresholds from `config`.
pub fn evaluate(checkpoint: &Checkpoint, split: &DatasetSplit, config: &RunConfig, label: &str) -> Result<EvalReport, PipelineError> {
    let model = MaskRcnn::from_params(checkpoint.config.model_config(), checkpoint.params.clone())?;
    evaluate_model(&model, split, config, label)
}

struct Scored {
    id: u64,
    level: String,
    has_crack: bool,
    image: EvalImage,
}

fn ap_or_none(images: &[EvalImage], variant: ApVariant) -> Result<Option<ApReport>, PipelineError> {
    match coco_ap(images, variant) {
        Ok(r) => Ok(Some(r)),
        Err(MetricsError::NoGroundTruth) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn summarise(items: &[&Scored], score_threshold: f64) -> Result<(ConfusionCounts, Option<ApReport>, Option<ApReport>), PipelineError> {
    let scores: BTreeMap<u64, Vec<f64>> = items
        .iter()
        .map(|s| (s.id, s.image.detections.iter().map(|d| d.score).collect()))
        .collect();
    let labels: BTreeMap<u64, bool> = items.iter().map(|s| (s.id, s.has_crack)).collect();
    let counts = confusion(&scores, &labels, score_threshold)?;
    let images: Vec<EvalImage> = items.iter().map(|s| s.image.clone()).collect();
    Ok((counts, ap_or_none(&images, ApVariant::Box)?, ap_or_none(&images, ApVariant::Mask)?))
}

/// Predicts every image of `split` and computes the AP family, the
/// image-level confusion counts and their per-scene breakdown.
pub fn evaluate_model(model: &MaskRcnn, split: &DatasetSplit, config: &RunConfig, label: &str) -> Result<EvalReport, PipelineError> {
    let predict = PredictConfig {
        score_threshold: config.score_threshold.min(AP_SCORE_FLOOR),
        ..config.predict_config()
    };
    let scored: Vec<Scored> = split
        .records()
        .par_iter()
        .map(|r| -> Result<Scored, PipelineError> {
            let sample = load_sample(split, r)?;
            let dets = model.predict(&sample.image, &predict)?;
            let ground_truth = split
                .annotations(r.id)
                .iter()
                .zip(split.masks(r)?)
                .map(|(a, mask)| GroundTruth { bbox: a.bbox, mask })
                .collect::<Vec<_>>();
            Ok(Scored {
                id: r.id,
                level: r.scene_level.as_str().to_string(),
                has_crack: !ground_truth.is_empty(),
                image: EvalImage {
                    image_id: r.id,
                    ground_truth,
                    detections: dets.iter().map(ScoredInstance::from).collect(),
                },
            })
        })
        .collect::<Result<_, _>>()?;

    let all: Vec<&Scored> = scored.iter().collect();
    let (counts, box_ap, mask_ap) = summarise(&all, config.score_threshold)?;
    let mut groups: BTreeMap<&str, Vec<&Scored>> = BTreeMap::new();
    for s in &scored {
        groups.entry(s.level.as_str()).or_default().push(s);
    }
    let mut by_scene_level = BTreeMap::new();
    for (level, items) in groups {
        let (c, b, m) = summarise(&items, config.score_threshold)?;
        by_scene_level.insert(
            level.to_string(),
            SceneBreakdown {
                num_images: items.len(),
                confusion: c,
                prf: prf_accuracy(&c)?,
                box_ap: b,
                mask_ap: m,
            },
        );
    }
    Ok(EvalReport {
        label: label.to_string(),
        dataset_digest: split.digest(),
        num_images: split.len(),
        score_threshold: config.score_threshold,
        mask_threshold: config.mask_threshold,
        box_ap,
        mask_ap,
        prf: prf_accuracy(&counts)?,
        confusion: counts,
        by_scene_level,
    })
}
