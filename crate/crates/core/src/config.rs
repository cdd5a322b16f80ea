//! Run configuration: one JSON document controlling the network, loss,
//! optimizer, data synthesis, and training loop.
//!
//! Every field has a default, so an empty document `{}` (or no config
//! file at all) yields the desk-scale setup: 64×64 inputs, width factor
//! 1/4, 400 synthetic samples, 30 epochs of Adam at 3e-4 with batch 4.
//! Unknown fields are rejected with the offending name rather than
//! silently ignored — a typo in a hyperparameter should fail, not run a
//! different experiment. Each parsed config exposes a stable SHA-256
//! hash over its canonical serialized form; artifacts carry that hash
//! so any result can be traced to the exact settings that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::loss::LossConfig;
use crate::net::{CouplerKind, FusionKind, NetOptions, PoolKind};
use crate::optim::AdamConfig;
use crate::{Error, Result};

fn default_extent() -> usize {
    64
}
fn default_width() -> f64 {
    0.25
}
fn default_channels() -> [usize; 5] {
    [32, 64, 128, 256, 512]
}
fn default_tau() -> usize {
    1
}
fn default_pooling() -> PoolKind {
    PoolKind::Dcp
}
fn default_fusion() -> FusionKind {
    FusionKind::Ccf
}
fn default_coupler() -> CouplerKind {
    CouplerKind::Dar
}
fn default_seed() -> u64 {
    17
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    4
}
fn default_samples() -> usize {
    400
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_difficulty() -> String {
    "standard".into()
}
fn default_threshold() -> f64 {
    0.5
}

/// Optimizer settings as they appear in the config file.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        OptimSection { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps }
    }
}

impl OptimSection {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// Training-loop and data settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    /// Total synthetic samples; split into train/validation.
    pub samples: usize,
    pub val_fraction: f64,
    /// Synthesis difficulty: `easy`, `standard`, or `hard`.
    pub difficulty: String,
    /// Binarization threshold for evaluation metrics.
    pub threshold: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch: default_batch(),
            samples: default_samples(),
            val_fraction: default_val_fraction(),
            difficulty: default_difficulty(),
            threshold: default_threshold(),
        }
    }
}

/// The whole run configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_extent")]
    pub extent: usize,
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default = "default_channels")]
    pub channels: [usize; 5],
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default = "default_pooling")]
    pub pooling: PoolKind,
    #[serde(default = "default_fusion")]
    pub fusion: FusionKind,
    #[serde(default = "default_coupler")]
    pub coupler: CouplerKind,
    pub loss: LossConfig,
    pub optim: OptimSection,
    pub train: TrainSection,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            extent: default_extent(),
            width: default_width(),
            channels: default_channels(),
            tau: default_tau(),
            pooling: default_pooling(),
            fusion: default_fusion(),
            coupler: default_coupler(),
            loss: LossConfig::default(),
            optim: OptimSection::default(),
            train: TrainSection::default(),
            seed: default_seed(),
        }
    }
}

impl RunConfig {
    /// Parse a JSON document, filling defaults and rejecting unknown or
    /// ill-typed fields with a field-level diagnostic.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file, or produce the full default when `path` is None.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                Self::from_json(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
            None => {
                let cfg = RunConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent < 16 || self.extent % 16 != 0 {
            return Err(Error::Config(format!(
                "extent {} must be a positive multiple of 16",
                self.extent
            )));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::Config(format!("width {} must be positive", self.width)));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channels entries must be positive".into()));
        }
        self.loss.validate()?;
        self.optim.adam().validate()?;
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if t.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if !(t.val_fraction > 0.0 && t.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train.val_fraction {} outside (0,1)",
                t.val_fraction
            )));
        }
        let val = ((t.samples as f64) * t.val_fraction).round() as usize;
        if t.samples < 2 || val == 0 || val >= t.samples {
            return Err(Error::Config(format!(
                "train.samples {} with val_fraction {} leaves an empty split",
                t.samples, t.val_fraction
            )));
        }
        if !(t.threshold > 0.0 && t.threshold < 1.0) {
            return Err(Error::Config(format!("train.threshold {} outside (0,1)", t.threshold)));
        }
        crate::data::SynthProfile::by_name(&t.difficulty)?;
        Ok(())
    }

    /// Structural options for network construction.
    pub fn net_options(&self) -> NetOptions {
        NetOptions {
            width: self.width,
            channels: self.channels,
            tau: self.tau,
            pooling: self.pooling,
            fusion: self.fusion,
            coupler: self.coupler,
        }
    }

    /// SHA-256 over the canonical serialized form (fixed field order),
    /// as a lowercase hex string.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
