use serde::{Deserialize, Serialize};

use super::HeadError;
use crate::nn::ops;

/// Probability clipping used by [`mask_loss`].
pub const MASK_PROB_EPS: f64 = 1e-7;

/// Smooth L1 with transition point 1.
pub fn smooth_l1(x: f64) -> f64 {
    ops::smooth_l1(x)
}

fn check_binary(target: &[f64]) -> Result<(), HeadError> {
    match target.iter().find(|&&t| t != 0.0 && t != 1.0) {
        Some(&t) => Err(HeadError::NonBinaryTarget(t)),
        None => Ok(()),
    }
}

/// Mean per-pixel binary cross-entropy between predicted probabilities
/// (clipped to `[ε, 1 − ε]`) and a binary target grid of the same size.
pub fn mask_loss(pred: &[f64], target: &[f64]) -> Result<f64, HeadError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(HeadError::ShapeMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    check_binary(target)?;
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(MASK_PROB_EPS, 1.0 - MASK_PROB_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// [`mask_loss`] evaluated on pre-sigmoid logits without clipping.
pub fn mask_loss_from_logits(logits: &[f64], target: &[f64]) -> Result<f64, HeadError> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(HeadError::ShapeMismatch {
            pred: logits.len(),
            target: target.len(),
        });
    }
    check_binary(target)?;
    Ok(logits.iter().zip(target).map(|(&z, &t)| ops::bce_with_logits(z, t)).sum::<f64>() / logits.len() as f64)
}

/// Gradient of [`mask_loss_from_logits`]: `(σ(z) − t) / m²` per element.
pub fn mask_loss_logit_grad(logits: &[f64], target: &[f64]) -> Vec<f64> {
    let n = logits.len() as f64;
    logits.iter().zip(target).map(|(&z, &t)| (ops::sigmoid(z) - t) / n).collect()
}

/// The five Mask R-CNN training losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub head_class: f64,
    pub head_box: f64,
    pub mask: f64,
}

impl LossBundle {
    pub fn terms(&self) -> [f64; 5] {
        [self.rpn_objectness, self.rpn_box, self.head_class, self.head_box, self.mask]
    }

    pub fn total(&self) -> f64 {
        self.terms().iter().sum()
    }

    pub fn is_valid(&self) -> bool {
        self.terms().iter().all(|v| v.is_finite() && *v >= 0.0)
    }

    pub fn add_scaled(&mut self, other: &LossBundle, factor: f64) {
        self.rpn_objectness += factor * other.rpn_objectness;
        self.rpn_box += factor * other.rpn_box;
        self.head_class += factor * other.head_class;
        self.head_box += factor * other.head_box;
        self.mask += factor * other.mask;
    }
}

/// Multipliers applied to each loss term before summation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub head_class: f64,
    pub head_box: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rpn_objectness: 1.0,
            rpn_box: 1.0,
            head_class: 1.0,
            head_box: 1.0,
            mask: 1.0,
        }
    }
}
