//! Run manifest: enough to locate every artifact of a run and to re-run it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thermvis::TrainConfig;

use crate::error::{io_err, CliError};

pub const FILE_NAME: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub trace: PathBuf,
    pub config: PathBuf,
    pub reports: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub seed: u64,
    pub dataset: PathBuf,
    pub config: TrainConfig,
    pub artifacts: Artifacts,
}

impl RunManifest {
    pub fn run_id(config: &TrainConfig) -> String {
        let ablation = config.ablation.map_or("custom".to_string(), thermvis::training::ablation_dir_name);
        format!("{}-{}-seed{}", config.protocol.name(), ablation, config.seed)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Internal(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::user(format!("{}: invalid run manifest: {e}", path.display())))
    }

    /// Paths that should exist once the run has completed.
    pub fn missing_artifacts(&self) -> Vec<PathBuf> {
        let a = &self.artifacts;
        a.checkpoints
            .iter()
            .chain([&a.final_checkpoint, &a.trace, &a.config])
            .chain(&a.reports)
            .filter(|p| !p.exists())
            .cloned()
            .collect()
    }
}
