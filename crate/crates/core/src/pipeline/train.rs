use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, evaluate_model, io_error, load_samples, Checkpoint, PipelineError, RunConfig};
use crate::augment::{self, Sample};
use crate::dataset::DatasetSplit;
use crate::heads::LossBundle;
use crate::metrics::ApReport;
use crate::model::{MaskRcnn, PlanSource, TrainTarget};
use crate::nn::{ParamStore, Tensor};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Redraws allowed when a crop removes every instance.
const AUGMENT_RETRIES: u64 = 8;
const SHUFFLE_STREAM: u64 = 1;
const PLAN_STREAM: u64 = 2;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: u64,
    /// Optimizer steps taken in this epoch.
    pub iterations: u64,
    /// Per-image means of the unweighted loss terms.
    pub losses: LossBundle,
    pub val_box_ap: Option<ApReport>,
    pub val_mask_ap: Option<ApReport>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub last: Checkpoint,
    /// Epoch of the checkpoint stored as best, when validation ran.
    pub best_epoch: Option<u64>,
    /// Epochs run by this call.
    pub log: Vec<EpochLog>,
}

/// One SGD-with-momentum step, weight decay folded into the gradient:
/// `d = g + wd·p`, `v = μ·v + d`, `p = p − lr·v`. Parameters without a
/// gradient entry are treated as having a zero gradient.
pub fn sgd_step(
    params: &mut ParamStore,
    velocity: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for (name, p) in params.iter_mut() {
        let g = grads.get(name);
        if momentum == 0.0 {
            // Same update; the shrink factor is applied as one product.
            let shrink = 1.0 - lr * weight_decay;
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let gv = g.map_or(0.0, |g| g.data()[i]);
                *pv = *pv * shrink - lr * gv;
            }
            continue;
        }
        let v = velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        for (i, (pv, vv)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let d = g.map_or(0.0, |g| g.data()[i]) + weight_decay * *pv;
            *vv = momentum * *vv + d;
            *pv -= lr * *vv;
        }
    }
}

fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

fn augmented(config: &RunConfig, sample: &Sample, epoch: u64, id: u64) -> Result<Sample, PipelineError> {
    for attempt in 0..AUGMENT_RETRIES {
        let mut rng = config.augment.rng_for(epoch, id);
        if attempt > 0 {
            rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.augment.seed, epoch, id, attempt]));
        }
        let out = augment::apply(&config.augment, sample.clone(), &mut rng)?;
        if !out.emptied {
            return Ok(out.sample);
        }
    }
    Ok(sample.clone())
}

/// Losses and parameter gradients of one image. Every random draw comes
/// from generators keyed by `(seed, epoch, image id)`.
fn image_gradients(
    model: &MaskRcnn,
    config: &RunConfig,
    sample: &Sample,
    epoch: u64,
    id: u64,
) -> Result<(LossBundle, BTreeMap<String, Tensor>), PipelineError> {
    let s = augmented(config, sample, epoch, id)?;
    let target = TrainTarget::from_sample(&s, config.input_size);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, PLAN_STREAM, epoch, id]));
    let step = model.training_step(&target, PlanSource::Sample(&mut rng))?;
    let grads = step.graph.backward(step.total).params(&model.params);
    Ok((step.losses, grads))
}

fn append_line(path: &Path, line: &str) -> Result<(), PipelineError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_error(path))?;
    writeln!(f, "{line}").map_err(io_error(path))
}

/// Trains from scratch, or from `resume`, until `config.epochs` epochs are
/// complete.
///
/// Writes `last.ckpt` after every epoch, `best.ckpt` whenever validation
/// mask AP improves, and appends to `train_log.jsonl`: first the effective
/// configuration, then one record per epoch.
pub fn train(
    config: &RunConfig,
    train_split: &DatasetSplit,
    val_split: Option<&DatasetSplit>,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutput, PipelineError> {
    config.validate_for_training()?;
    if train_split.is_empty() {
        return Err(PipelineError::EmptyTrainSplit);
    }
    std::fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;
    let log_path = out_dir.join(TRAIN_LOG);
    let echo = serde_json::json!({ "config": config.to_toml_string() });
    append_line(&log_path, &echo.to_string())?;

    let digest = config.digest();
    let (mut model, mut velocity, start, mut best_score) = match resume {
        Some(ck) => {
            if ck.config_digest != digest {
                return Err(PipelineError::ConfigMismatch {
                    checkpoint: ck.config_digest,
                    current: digest,
                });
            }
            let model = MaskRcnn::from_params(config.model_config(), ck.params)?;
            (model, ck.optimizer_state, ck.epoch, ck.best_score)
        }
        None => (MaskRcnn::new(config.model_config(), config.seed)?, BTreeMap::new(), 0, None),
    };
    let samples = load_samples(train_split)?;
    let mut best_epoch = None;
    let mut log = Vec::new();
    let mut last = Checkpoint::new(model.params.clone(), velocity.clone(), start, config);
    last.best_score = best_score;

    for epoch in start..config.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, SHUFFLE_STREAM, epoch])));
        let mut epoch_losses = LossBundle::default();
        let mut iterations = 0;
        for batch in order.chunks(config.batch_size) {
            let ids: Vec<u64> = batch.iter().map(|&i| samples[i].0).collect();
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| image_gradients(&model, config, &samples[i].1, epoch, samples[i].0))
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for r in results {
                let (losses, g) = r?;
                if !losses.is_valid() {
                    return Err(PipelineError::NonFiniteLoss { epoch: epoch + 1, image_ids: ids });
                }
                epoch_losses.add_scaled(&losses, 1.0 / samples.len() as f64);
                for (name, t) in g {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.add_assign(&t),
                        None => {
                            grads.insert(name, t);
                        }
                    }
                }
            }
            for t in grads.values_mut() {
                t.scale_assign(scale);
            }
            let norm = grad_norm(&grads);
            if !norm.is_finite() {
                return Err(PipelineError::NonFiniteLoss { epoch: epoch + 1, image_ids: ids });
            }
            if config.grad_clip_norm > 0.0 && norm > config.grad_clip_norm {
                let f = config.grad_clip_norm / norm;
                for t in grads.values_mut() {
                    t.scale_assign(f);
                }
            }
            sgd_step(&mut model.params, &mut velocity, &grads, config.lr, config.momentum, config.weight_decay);
            iterations += 1;
        }

        let done = epoch + 1;
        let (val_box_ap, val_mask_ap) = match val_split {
            Some(v) => {
                let r = evaluate_model(&model, v, config, "val")?;
                (r.box_ap, r.mask_ap)
            }
            None => (None, None),
        };
        let improved = match (val_mask_ap.map(|r| r.ap), best_score) {
            (Some(ap), Some(best)) => ap > best,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            best_score = val_mask_ap.map(|r| r.ap);
        }
        last = Checkpoint::new(model.params.clone(), velocity.clone(), done, config);
        last.best_score = best_score;
        if improved {
            last.save(&out_dir.join(BEST_CHECKPOINT))?;
            best_epoch = Some(done);
        }
        last.save(&out_dir.join(LAST_CHECKPOINT))?;

        let entry = EpochLog {
            epoch: done,
            iterations,
            losses: epoch_losses,
            val_box_ap,
            val_mask_ap,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        append_line(&log_path, &serde_json::to_string(&entry).expect("EpochLog serializes"))?;
        info!(
            "epoch {done}/{} loss {:.4} ({:.1}s)",
            config.epochs,
            entry.losses.total(),
            entry.wall_time_s
        );
        log.push(entry);
    }
    Ok(TrainOutput { last, best_epoch, log })
}
