//! TOML run configuration.
//!
//! ```toml
//! [model]
//! variant = "M"
//! g = 4
//!
//! [data]
//! train_dir = "data/its"
//! patch_size = 256
//!
//! [optim]
//! steps = 100000
//!
//! [run]
//! checkpoint_dir = "runs/m"
//! ```
//!
//! Every section and key is optional except `data.train_dir`; unknown keys
//! are rejected. Relative paths resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::olif::{BranchMode, ScanInit};
use crate::train::adamw::AdamWConfig;
use crate::train::schedule::FINAL_LR;
use crate::train::TrainOptions;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: String,
    /// LIF group steps.
    pub g: usize,
    pub drop_path: f64,
    pub channel_norm: bool,
    pub branch_mode: BranchMode,
    pub scan_init: ScanInit,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::medium();
        Self {
            variant: m.variant,
            g: m.groups,
            drop_path: m.drop_path_rate,
            channel_norm: m.channel_norm,
            branch_mode: m.branch_mode,
            scan_init: m.scan_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub patch_size: usize,
    pub flip: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { train_dir: None, val_dir: None, patch_size: 256, flip: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr_main: f64,
    pub lr_lif: f64,
    pub final_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub batch_size: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr_main: 1e-4,
            lr_lif: 5e-5,
            final_lr: FINAL_LR,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            steps: 100_000,
            batch_size: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, checkpoint_dir: PathBuf::from("checkpoints"), eval_every: 1000, checkpoint_every: 1000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub optim: OptimSection,
    pub loss: LossConfig,
    pub run: RunSection,
}

impl RunConfig {
    /// Parses and validates; paths are left as written.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.data.train_dir.as_mut().map(resolve);
        cfg.data.val_dir.as_mut().map(resolve);
        resolve(&mut cfg.run.checkpoint_dir);
        Ok(cfg)
    }

    /// Checks values that do not depend on the filesystem.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model_config()?;
        if self.data.train_dir.is_none() {
            return bad("data.train_dir is required".into());
        }
        if self.data.patch_size == 0 {
            return bad("data.patch_size must be positive".into());
        }
        self.train_options().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.optim.final_lr >= 0.0) {
            return bad(format!("optim.final_lr must be non-negative, got {}", self.optim.final_lr));
        }
        if !(self.optim.eps > 0.0) {
            return bad(format!("optim.eps must be positive, got {}", self.optim.eps));
        }
        Ok(())
    }

    /// Checks that the data directories exist.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        for (key, dir) in [("data.train_dir", &self.data.train_dir), ("data.val_dir", &self.data.val_dir)] {
            if let Some(d) = dir {
                if !d.is_dir() {
                    return Err(ConfigError::Invalid(format!("{key}: {} is not a directory", d.display())));
                }
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let m = &self.model;
        let c = ModelConfig {
            groups: m.g,
            drop_path_rate: m.drop_path,
            channel_norm: m.channel_norm,
            branch_mode: m.branch_mode,
            scan_init: m.scan_init,
            ..ModelConfig::preset(&m.variant).map_err(|e| ConfigError::Invalid(format!("model.variant: {e}")))?
        };
        c.validate().map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        Ok(c)
    }

    pub fn train_options(&self) -> TrainOptions {
        let o = &self.optim;
        TrainOptions {
            steps: o.steps,
            batch_size: o.batch_size,
            lr_main: o.lr_main,
            lr_lif: o.lr_lif,
            final_lr: o.final_lr,
            adamw: AdamWConfig { beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay, weight_decay_lif: 0.0 },
            loss: self.loss.clone(),
            seed: self.run.seed,
            eval_every: self.run.eval_every,
            checkpoint_dir: Some(self.run.checkpoint_dir.clone()),
            checkpoint_every: self.run.checkpoint_every,
        }
    }
}
