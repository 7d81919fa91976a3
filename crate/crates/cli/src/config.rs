use std::path::{Path, PathBuf};

use mfish_core::hosvd::HosvdParams;
use mfish_core::ingest::LabelCoding;
use mfish_core::synth::SynthConfig;
use mfish_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{read_json, write_json, CliError, Result};

/// Written beside every run's outputs.
pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Crop window and downscale applied by `ingest`. The crop is shrunk to the
/// frame when the images are smaller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub crop_width: usize,
    pub crop_height: usize,
    pub scale: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            crop_width: 536,
            crop_height: 490,
            scale: 0.7,
        }
    }
}

/// Everything a command needs. Loaded from `--config`, overridden by flags,
/// and saved (resolved) as `run_config.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub workers: Option<usize>,
    pub coding: LabelCoding,
    pub ingest: IngestConfig,
    pub train: TrainConfig,
    /// `train` stops once the training-set CCR reaches this value.
    pub stop_at_train_ccr: Option<f64>,
    pub hosvd: HosvdParams,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(CliError::MissingInput(path.to_path_buf()));
        }
        read_json(path).map_err(|e| CliError::Config(e.to_string()))
    }

    /// One seed for every randomised stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.hosvd.seed = seed;
        self.synth.seed = seed;
    }

    /// The manifest path, made absolute so saved configs stay valid from
    /// any working directory.
    pub fn require_manifest(&self) -> Result<PathBuf> {
        let path = self
            .manifest
            .as_ref()
            .ok_or_else(|| CliError::Config("--manifest is required".into()))?;
        if !path.is_file() {
            return Err(CliError::MissingInput(path.clone()));
        }
        std::fs::canonicalize(path).map_err(crate::io_err(path))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(crate::io_err(dir))?;
        write_json(&dir.join(RUN_CONFIG_FILE), self)
    }
}
