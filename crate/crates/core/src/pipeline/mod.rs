//! Training, evaluation and inference drivers with their on-disk formats.

pub mod checkpoint;
pub mod config;
mod evaluate;
mod infer;
mod train;

use std::path::PathBuf;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{AugmentError, Sample};
use crate::dataset::{DatasetError, DatasetSplit, ImageRecord};
use crate::metrics::MetricsError;
use crate::model::{image_to_array, ModelError};

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ConfigError, DataConfig, RunConfig};
pub use evaluate::{evaluate, evaluate_model, AP_SCORE_FLOOR};
pub use infer::{infer, infer_model, render_overlay, rle_decode, rle_encode, InferDetection, InferRecord, InferSummary, Rle};
pub use train::{sgd_step, train, EpochLog, TrainOutput, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("non-finite loss in epoch {epoch}, batch images {image_ids:?}")]
    NonFiniteLoss { epoch: u64, image_ids: Vec<u64> },
    #[error("checkpoint was written by a different config (digest {checkpoint}, current {current})")]
    ConfigMismatch { checkpoint: String, current: String },
    #[error("malformed run-length encoding: {0}")]
    BadRle(String),
}

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> PipelineError {
    let path = path.into();
    move |source| PipelineError::Io { path, source }
}

/// A 64-bit seed derived from several integers; distinct inputs give
/// independent streams.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Decodes an image with its instance masks; boxes are the tight bounds of
/// the rasterised masks.
pub fn load_sample(split: &DatasetSplit, record: &ImageRecord) -> Result<Sample, DatasetError> {
    let image = image_to_array(&split.load_image(record)?);
    let masks = split.masks(record)?;
    let (masks, boxes) = masks
        .into_iter()
        .filter_map(|m| m.tight_bbox().map(|b| (m, b)))
        .unzip();
    Ok(Sample {
        image,
        masks,
        boxes,
        scene_level: record.scene_level,
    })
}

/// Loads every image of a split, in record order.
pub fn load_samples(split: &DatasetSplit) -> Result<Vec<(u64, Sample)>, DatasetError> {
    split
        .records()
        .par_iter()
        .map(|r| load_sample(split, r).map(|s| (r.id, s)))
        .collect()
}
