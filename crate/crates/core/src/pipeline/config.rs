use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::AugmentPolicy;
use crate::backbones::{BackboneConfig, BackboneKind};
use crate::heads::{HeadConfig, PredictConfig};
use crate::model::ModelConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` is not of the form key=value")]
    MalformedOverride(String),
    #[error("bad value for `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where training and evaluation images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// COCO-style annotation file.
    pub annotations: String,
    pub image_root: String,
    /// Optional separate validation annotations (same image root). Empty
    /// means the validation split is carved out of `annotations`.
    pub val_annotations: String,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            annotations: String::new(),
            image_root: String::new(),
            val_annotations: String::new(),
            train_fraction: 0.8,
            val_fraction: 0.1,
            split_seed: 0,
        }
    }
}

/// Everything a run needs. Missing keys in a config file take the values
/// of [`RunConfig::default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub input_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub batch_size: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub score_threshold: f64,
    pub mask_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub augment: AugmentPolicy,
    pub seed: u64,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper(BackboneKind::APanet)
    }
}

impl RunConfig {
    /// Full-size network with the published optimiser settings.
    pub fn paper(kind: BackboneKind) -> Self {
        let model = ModelConfig::paper(kind);
        let predict = PredictConfig::default();
        Self {
            backbone: model.backbone,
            heads: model.heads,
            input_size: model.input_size,
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 2,
            grad_clip_norm: 0.0,
            score_threshold: predict.score_threshold,
            mask_threshold: predict.mask_threshold,
            nms_iou: predict.nms_iou,
            max_detections: predict.max_detections,
            augment: AugmentPolicy::default(),
            seed: 0,
            data: DataConfig::default(),
        }
    }

    /// Toy widths and 64-pixel inputs for CPU runs.
    pub fn toy(kind: BackboneKind) -> Self {
        let model = ModelConfig::toy(kind);
        Self {
            backbone: model.backbone,
            heads: model.heads,
            input_size: model.input_size,
            grad_clip_norm: 5.0,
            ..Self::paper(kind)
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            heads: self.heads.clone(),
            input_size: self.input_size,
        }
    }

    pub fn predict_config(&self) -> PredictConfig {
        PredictConfig {
            score_threshold: self.score_threshold,
            mask_threshold: self.mask_threshold,
            nms_iou: self.nms_iou,
            max_detections: self.max_detections,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        self.validate_for_training()
    }

    /// Every check of [`RunConfig::validate`] except `lr > 0`; a zero
    /// learning rate is accepted here so that frozen control runs can go
    /// through the training loop.
    pub fn validate_for_training(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return bad(format!("grad_clip_norm must be non-negative, got {}", self.grad_clip_norm));
        }
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("mask_threshold", self.mask_threshold),
            ("nms_iou", self.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_detections == 0 {
            return bad("max_detections must be positive".into());
        }
        self.model_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.augment.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Self::from_table(value)
    }

    fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            let msg = e.to_string();
            match unknown_field(&msg) {
                Some(k) => ConfigError::UnknownKey(k),
                None => ConfigError::Parse(msg),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes to TOML")
    }

    /// Sets one key by dotted path (`heads.rpn_test.nms_iou`, or
    /// `augment.ops.0.p` for array elements). The value is parsed as a TOML
    /// value, falling back to a bare string.
    pub fn apply_override(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        let mut root = toml::Value::try_from(self).expect("RunConfig serializes to TOML");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = match slot {
                toml::Value::Table(t) => t.get_mut(part),
                toml::Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        }
        *slot = coerce(slot, parse_value(value));
        let toml::Value::Table(table) = root else {
            unreachable!("config root is a table")
        };
        Self::from_table(table).map_err(|e| ConfigError::BadValue {
            key: key.to_string(),
            message: e.to_string(),
        })
    }

    /// Applies `key=value` strings in order.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut cfg = self.clone();
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::MalformedOverride(o.to_string()))?;
            cfg = cfg.apply_override(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// SHA-256 of the configuration with `epochs` zeroed, so that a run may
    /// be resumed with a larger epoch budget.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        let text = serde_json::to_string(&c).expect("RunConfig serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Integers become floats where a float is expected, and anything becomes a
/// string where a string is expected.
fn coerce(existing: &toml::Value, new: toml::Value) -> toml::Value {
    match (existing, new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (toml::Value::String(_), toml::Value::String(s)) => toml::Value::String(s),
        (toml::Value::String(_), other) => toml::Value::String(other.to_string()),
        (_, new) => new,
    }
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}
