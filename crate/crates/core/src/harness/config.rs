use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asam::LossWeights;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rftg::Thresholds;
use crate::synthgen::CohortSpec;

pub const SEED_ENV: &str = "RTGMFF_SEED";
pub const THREADS_ENV: &str = "RTGMFF_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub backbone_lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub freeze_backbone_epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 120,
            early_stop_patience: 10,
            batch_size: 8,
            backbone_lr: 1e-4,
            head_lr: 5e-4,
            weight_decay: 1e-4,
            freeze_backbone_epochs: 5,
            warmup_epochs: 5,
            seed: 42,
            alpha: 0.8,
            beta: 0.2,
            tau1: 0.15,
            tau2: 0.30,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn thresholds(&self) -> Result<Thresholds> {
        Thresholds::new(self.tau1, self.tau2)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.backbone_lr, self.head_lr];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "train_config",
                format!(
                    "learning rates must be positive and weight decay non-negative (backbone {}, head {}, wd {})",
                    self.backbone_lr, self.head_lr, self.weight_decay
                ),
            ));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::invalid(
                "train_config",
                "max_epochs, batch_size and early_stop_patience must be positive",
            ));
        }
        if self.warmup_epochs >= self.max_epochs {
            return Err(Error::invalid(
                "train_config",
                format!("warmup_epochs {} must be below max_epochs {}", self.warmup_epochs, self.max_epochs),
            ));
        }
        self.loss_weights().validate()?;
        self.thresholds()?;
        self.model.validate()
    }

    /// Stable digest of every field, used to tie checkpoints to their run.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    TaskAccuracy,
    #[default]
    RoiMacroF1,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task_accuracy" => Ok(Self::TaskAccuracy),
            "roi_macro_f1" => Ok(Self::RoiMacroF1),
            _ => Err(Error::invalid("objective", format!("unknown objective {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    #[default]
    Tpe,
    Uniform,
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tpe" => Ok(Self::Tpe),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::invalid("sampler", format!("unknown sampler {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub trials: usize,
    pub startup_trials: usize,
    pub candidates: usize,
    pub inner_folds: usize,
    pub short_epochs: usize,
    pub objective: Objective,
    pub sampler: Sampler,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            startup_trials: 20,
            candidates: 24,
            inner_folds: 3,
            short_epochs: 15,
            objective: Objective::RoiMacroF1,
            sampler: Sampler::Tpe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Adds an α = β = 0 reference cell.
    pub include_zero: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alpha: vec![0.2, 0.5, 0.8],
            beta: vec![0.1, 0.2, 0.3],
            include_zero: false,
        }
    }
}

/// The single declarative config file accepted by `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub cohort: CohortSpec,
    pub tune: TuneConfig,
    pub sweep: SweepConfig,
    /// Rayon worker count; 0 keeps the library default.
    pub threads: usize,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            context: "config".into(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format {
                context: path.display().to_string(),
                msg,
            },
            other => other,
        })
    }

    /// Applies `RTGMFF_SEED` (training and cohort seed) and
    /// `RTGMFF_THREADS` from the given lookup.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = lookup(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid("config", format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.train.seed = seed;
            self.cohort.seed = seed;
        }
        if let Some(v) = lookup(THREADS_ENV) {
            self.threads = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid("config", format!("{THREADS_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.cohort.validate()?;
        if self.tune.inner_folds < 2 || self.tune.trials == 0 {
            return Err(Error::invalid("tune_config", "need ≥ 2 inner folds and ≥ 1 trial"));
        }
        let bad = self.sweep.alpha.iter().chain(&self.sweep.beta).any(|v| !(*v >= 0.0 && v.is_finite()));
        if bad || self.sweep.alpha.is_empty() || self.sweep.beta.is_empty() {
            return Err(Error::invalid("sweep_config", "alpha and beta grids must be non-empty and non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_keep_lr_ratio() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.train.head_lr, 5.0 * c.train.backbone_lr);
    }

    #[test]
    fn toml_overrides_and_rejects_unknown_keys() {
        let c = RunConfig::from_toml("[train]\nmax_epochs = 7\n[train.model]\ndim = 8\n[tune]\nobjective = \"task_accuracy\"\n").unwrap();
        assert_eq!(c.train.max_epochs, 7);
        assert_eq!(c.train.model.dim, 8);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.tune.objective, Objective::TaskAccuracy);
        assert!(RunConfig::from_toml("[train]\nmax_epoch = 7\n").is_err());
    }

    #[test]
    fn env_overrides() {
        let mut c = RunConfig::default();
        c.apply_env(|k| (k == SEED_ENV).then(|| "7".to_string())).unwrap();
        assert_eq!((c.train.seed, c.cohort.seed), (7, 7));
        assert!(c.apply_env(|k| (k == THREADS_ENV).then(|| "x".to_string())).is_err());
    }

    #[test]
    fn digest_tracks_fields() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 43, ..a };
        assert_eq!(a.digest(), TrainConfig::default().digest());
        assert_ne!(a.digest(), b.digest());
    }
}
