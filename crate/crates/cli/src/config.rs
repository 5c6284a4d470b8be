//! Resolved run configuration, echoed next to every command's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use facectl_core::data::{BinarizeConfig, SyntheticSpec};
use facectl_core::denoiser::ModelConfig;
use facectl_core::training::TrainConfig;
use facectl_core::Profile;
use serde::Serialize;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleSettings {
    pub alpha: f64,
    pub beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fine: Option<facectl_core::coretypes::FineCondition>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emotion: Option<usize>,
    pub clips: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSettings {
    pub classifier_epochs: usize,
    pub classifier_seed: u64,
}

/// Profile defaults with every override applied.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub profile: Profile,
    pub seed: u64,
    pub precision: Precision,
    pub paths: Paths,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleSettings>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binarize: Option<BinarizeConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSettings>,
}

impl RunConfig {
    pub fn new(command: &str, profile: Profile, seed: u64, precision: Precision) -> Self {
        Self {
            command: command.into(),
            profile,
            seed,
            precision,
            paths: Paths::default(),
            data: None,
            model: None,
            train: None,
            sample: None,
            binarize: None,
            eval: None,
        }
    }

    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_CONFIG), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
