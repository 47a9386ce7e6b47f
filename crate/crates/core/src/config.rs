//! Run configuration, stored as TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::metrics::MatchCriterion;
use crate::postprocess::PostprocessConfig;
use crate::preprocess::{AugmentConfig, FrameMode, MixupPolicy};
use crate::unet::{UNetConfig, SPATIAL_MULTIPLE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root or manifest path.
    pub path: PathBuf,
    /// Network input `[height, width]`; frames are resized when they differ.
    pub image_size: [usize; 2],
    pub frame_mode: FrameMode,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
    /// Fraction of the training split actually used (training-size ablations).
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::from("data/phantom"),
            image_size: [192, 192],
            frame_mode: FrameMode::Three,
            split: [0.64, 0.16, 0.20],
            split_seed: 0,
            train_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channel_scale: f64,
    pub dropout2d_p: f64,
    pub classifier_dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channel_scale: 1.0,
            dropout2d_p: 0.15,
            classifier_dropout_p: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            channel_scale: self.channel_scale,
            dropout2d_p: self.dropout2d_p,
            ..UNetConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub classifier_epochs: usize,
    pub seed: u64,
    /// Training frames used to calibrate the betas for per-epoch validation.
    pub val_calibration_frames: usize,
    /// Worker threads; 0 means one per core.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            classifier_epochs: 20,
            seed: 0,
            val_calibration_frames: 128,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sgd: SgdConfig,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub mixup: MixupPolicy,
    pub postprocess: PostprocessConfig,
    pub eval: MatchCriterion,
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field} {msg}"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.data.image_size;
        if h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(field_err(
                "data.image_size",
                format!("must be positive multiples of {SPATIAL_MULTIPLE}, got [{h}, {w}]"),
            ));
        }
        let [a, b, c] = self.data.split;
        if [a, b, c].iter().any(|r| !(r.is_finite() && *r >= 0.0))
            || a <= 0.0
            || (a + b + c - 1.0).abs() > 1e-9
        {
            return Err(field_err(
                "data.split",
                format!("must be non-negative fractions summing to 1 with a positive train share, got [{a}, {b}, {c}]"),
            ));
        }
        let f = self.data.train_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(field_err(
                "data.train_fraction",
                format!("must be in (0, 1], got {f}"),
            ));
        }
        let m = &self.model;
        if !(m.channel_scale > 0.0 && m.channel_scale <= 4.0) {
            return Err(field_err(
                "model.channel_scale",
                format!("must be in (0, 4], got {}", m.channel_scale),
            ));
        }
        for (name, p) in [
            ("model.dropout2d_p", m.dropout2d_p),
            ("model.classifier_dropout_p", m.classifier_dropout_p),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(field_err(name, format!("must be in [0, 1), got {p}")));
            }
        }
        if self.train.batch_size == 0 {
            return Err(field_err("train.batch_size", "must be >= 1"));
        }
        if self.train.val_calibration_frames == 0 {
            return Err(field_err("train.val_calibration_frames", "must be >= 1"));
        }
        let s = &self.sgd;
        if !(s.learning_rate >= 0.0 && s.learning_rate.is_finite()) {
            return Err(field_err(
                "sgd.learning_rate",
                format!("must be finite and >= 0, got {}", s.learning_rate),
            ));
        }
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(field_err(
                "sgd.momentum",
                format!("must be in [0, 1), got {}", s.momentum),
            ));
        }
        if !(s.weight_decay >= 0.0 && s.weight_decay.is_finite()) {
            return Err(field_err(
                "sgd.weight_decay",
                format!("must be finite and >= 0, got {}", s.weight_decay),
            ));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        self.mixup.validate()?;
        self.postprocess.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
