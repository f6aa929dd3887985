use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::SyntheticGenConfig;
use crate::embedder::TrainConfig;
use crate::exclusion::DetectorNoiseModel;
use crate::losses::MsLossConfig;
use crate::metrics::EvalProtocol;
use crate::probes::{CROP_BOTTOM, CROP_TOP};
use crate::{Error, Result};

use super::pareto::SearchSpace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "ms")]
    Ms,
    #[serde(rename = "index")]
    Index,
    #[serde(rename = "confusion")]
    Confusion,
    #[serde(rename = "index+confusion")]
    IndexConfusion,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Ms, Arm::Index, Arm::Confusion, Arm::IndexConfusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Ms => "ms",
            Arm::Index => "index",
            Arm::Confusion => "confusion",
            Arm::IndexConfusion => "index+confusion",
        }
    }

    pub fn uses_confusion_model(self) -> bool {
        matches!(self, Arm::Confusion | Arm::IndexConfusion)
    }

    pub fn uses_exclusion(self) -> bool {
        matches!(self, Arm::Index | Arm::IndexConfusion)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown arm `{s}`")))
    }
}

/// Confusion-loss settings; the forbidden set is always the training
/// identities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfusionSettings {
    pub weight: f64,
    pub margin: f64,
    pub gamma: f64,
    /// Start from the trained MS model rather than a fresh initialisation.
    pub init_from_ms: bool,
}

impl Default for ConfusionSettings {
    fn default() -> Self {
        Self {
            weight: 4.0,
            margin: 0.1,
            gamma: 10.0,
            init_from_ms: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub enabled: bool,
    pub crop_top: f64,
    pub crop_bottom: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            crop_top: CROP_TOP,
            crop_bottom: CROP_BOTTOM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSettings {
    /// Zero disables the search.
    pub n_trials: usize,
    pub space: SearchSpace,
    /// Epochs per trial.
    pub epochs: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            n_trials: 0,
            space: SearchSpace::default(),
            epochs: 5,
        }
    }
}

/// Everything an experiment run needs. The root `seed` replaces the seeds
/// of the nested sections, one named substream each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub arms: Vec<Arm>,
    pub generator: SyntheticGenConfig,
    pub ms_loss: MsLossConfig,
    pub train_ms: TrainConfig,
    pub train_confusion: TrainConfig,
    pub confusion: ConfusionSettings,
    pub detector: DetectorNoiseModel,
    pub protocols: Vec<EvalProtocol>,
    pub probes: ProbeSettings,
    /// Shuffles for the chance level of the MS person protocol; zero skips it.
    pub permutation_shuffles: usize,
    pub search: SearchSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            arms: Arm::ALL.to_vec(),
            generator: SyntheticGenConfig::default(),
            ms_loss: MsLossConfig::default(),
            train_ms: TrainConfig::default(),
            train_confusion: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            confusion: ConfusionSettings::default(),
            detector: DetectorNoiseModel {
                miss_rate: 0.05,
                misclass_rate: 0.1,
                false_person_rate: 0.02,
                box_jitter: 0.03,
                duplicate_rate: 0.1,
                spurious_rate: 0.05,
                seed: 0,
            },
            protocols: vec![EvalProtocol::person(), EvalProtocol::non_person()],
            probes: ProbeSettings::default(),
            permutation_shuffles: 1000,
            search: SearchSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::InvalidConfig("no arms selected".into()));
        }
        let mut seen = self.arms.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.arms.len() {
            return Err(Error::InvalidConfig("arms listed twice".into()));
        }
        if self.protocols.is_empty() {
            return Err(Error::InvalidConfig("no evaluation protocols".into()));
        }
        self.generator.validate()?;
        self.ms_loss.validate()?;
        self.train_ms.validate()?;
        self.train_confusion.validate()?;
        self.detector.validate()?;
        self.search.space.validate()?;
        let c = &self.confusion;
        if !(c.weight >= 0.0 && c.gamma > 0.0 && c.margin.is_finite()) {
            return Err(Error::InvalidConfig(
                "confusion weight >= 0 and gamma > 0 required".into(),
            ));
        }
        if self.probes.enabled
            && !(self.probes.crop_top >= 0.0
                && self.probes.crop_bottom >= 0.0
                && self.probes.crop_top + self.probes.crop_bottom < 1.0)
        {
            return Err(Error::InvalidConfig(
                "crop fractions must be >= 0 and sum below 1".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }
}
