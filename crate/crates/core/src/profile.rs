//! Named bundles of defaults. `desk` fits a single CPU in minutes; `paper`
//! carries the full-size dimensions.

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::denoiser::ModelConfig;
use crate::error::{Error, Result};
use crate::evaluation::{ClassifierConfig, ClassifierTraining};
use crate::training::{AdamWConfig, Stage, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}; use desk or paper"))),
        }
    }
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        }
    }

    pub fn model(self) -> ModelConfig {
        match self {
            Self::Desk => ModelConfig::desk(),
            Self::Paper => ModelConfig::paper(),
        }
    }

    pub fn data(self) -> SyntheticSpec {
        SyntheticSpec::default()
    }

    pub fn train(self, stage: Stage) -> TrainConfig {
        let base = TrainConfig::new(stage);
        match (self, stage) {
            (Self::Paper, _) => base,
            (Self::Desk, Stage::Base) => TrainConfig {
                batch_size: 8,
                iterations: 4000,
                optimizer: AdamWConfig { lr: 1e-3, ..Default::default() },
                ..base
            },
            (Self::Desk, Stage::Fine) => TrainConfig {
                batch_size: 8,
                iterations: 4000,
                optimizer: AdamWConfig { lr: 5e-3, ..Default::default() },
                ..base
            },
        }
    }

    pub fn classifier(self, n_classes: usize) -> ClassifierConfig {
        match self {
            Self::Desk => ClassifierConfig::desk(n_classes),
            Self::Paper => ClassifierConfig::paper(n_classes),
        }
    }

    pub fn classifier_training(self) -> ClassifierTraining {
        ClassifierTraining::default()
    }
}
