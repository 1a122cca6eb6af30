//! Experiment configuration file.
//!
//! A TOML document with one section per stage. Unknown keys are rejected,
//! and every missing key takes its default; the fully resolved form is
//! archived next to the outputs. Stage seeds are derived from the single
//! top-level `seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::MarginPolicy;
use crate::error::{config_err, Error, Result};
use crate::gan::GanConfig;
use crate::io_util::read_to_string;
use crate::losses::LossConfig;
use crate::margin::MarginHeadConfig;
use crate::oracle::OracleWorldSpec;
use crate::providers::{ORACLE, PROVIDER_NAMES};
use crate::recognition::RecognizerTrainConfig;
use crate::training::TrainConfig;

/// Embedding and pose providers used during GAN training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProvidersConfig {
    pub embedder: String,
    pub pose: String,
    pub embedder_checkpoint: Option<String>,
    pub pose_checkpoint: Option<String>,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        Self {
            embedder: ORACLE.into(),
            pose: ORACLE.into(),
            embedder_checkpoint: None,
            pose_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Synthetic identities.
    pub k: usize,
    /// Images per synthetic identity.
    pub m: usize,
    /// Oracle ("real") identities mixed into the recognizer's training set.
    pub real_identities: usize,
    /// Images per oracle identity in every rendered set.
    pub real_m: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            k: 50,
            m: 20,
            real_identities: 0,
            real_m: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerConfig {
    pub head: MarginHeadConfig,
    pub train: RecognizerTrainConfig,
    /// Held-out oracle identities for the validation protocol.
    pub validation_identities: usize,
    /// Held-out oracle identities for the test protocol.
    pub test_identities: usize,
    pub folds: usize,
    /// Positive (and, separately, negative) pairs per fold.
    pub pairs_per_fold: usize,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            head: MarginHeadConfig::default(),
            train: RecognizerTrainConfig::default(),
            validation_identities: 25,
            test_identities: 50,
            folds: 10,
            pairs_per_fold: 300,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub policy: MarginPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrechetConfig {
    pub eps: f64,
}

impl Default for FrechetConfig {
    fn default() -> Self {
        Self {
            eps: crate::frechet::DEFAULT_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output root; relative paths resolve against the working directory.
    pub out: String,
    pub world: OracleWorldSpec,
    pub gan: GanConfig,
    pub losses: LossConfig,
    pub train: TrainConfig,
    pub providers: ProvidersConfig,
    pub dataset: DatasetConfig,
    pub recognizer: RecognizerConfig,
    pub attack: AttackConfig,
    pub frechet: FrechetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "runs/desk".into(),
            world: OracleWorldSpec::default(),
            gan: GanConfig::default(),
            losses: LossConfig::default(),
            train: TrainConfig::default(),
            providers: ProvidersConfig::default(),
            dataset: DatasetConfig::default(),
            recognizer: RecognizerConfig::default(),
            attack: AttackConfig::default(),
            frechet: FrechetConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Toml(t) => Error::format(path, t.to_string()),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.gan.validate()?;
        self.losses.validate()?;
        self.train.validate()?;
        self.recognizer.head.validate()?;
        self.recognizer.train.validate()?;
        for name in [&self.providers.embedder, &self.providers.pose] {
            if !PROVIDER_NAMES.contains(&name.as_str()) {
                return Err(config_err!("unknown provider {name:?}"));
            }
        }
        if self.gan.resolution != self.world.resolution || self.recognizer.train.cnn.resolution != self.world.resolution {
            return Err(config_err!("gan, recognizer and world resolutions must agree"));
        }
        if self.dataset.k == 0 || self.dataset.m == 0 || self.dataset.real_m == 0 {
            return Err(config_err!("dataset sizes must be positive"));
        }
        let oracle_needed = self.dataset.real_identities + self.recognizer.validation_identities + self.recognizer.test_identities;
        if oracle_needed > crate::oracle::N_IDENTITIES {
            return Err(config_err!(
                "{oracle_needed} oracle identities requested, the world has {}",
                crate::oracle::N_IDENTITIES
            ));
        }
        if self.recognizer.validation_identities < 2 || self.recognizer.test_identities < 2 {
            return Err(config_err!("validation and test sets need at least two identities"));
        }
        if self.recognizer.folds < 2 || self.recognizer.pairs_per_fold == 0 {
            return Err(config_err!("protocols need at least two folds and one pair per fold"));
        }
        if !(self.frechet.eps >= 0.0) {
            return Err(config_err!("frechet eps must be non-negative"));
        }
        Ok(())
    }

    /// Copies the global seed into every stage configuration.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = self.seed;
        c.recognizer.train.seed = self.seed;
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config_err!("cannot serialize configuration: {e}"))
    }
}
