use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use promptseg_core::data::SplitManifest;
use promptseg_core::metrics::EvalReport;
use promptseg_core::training::TrainConfig;

pub const RECORD_FILE: &str = "record.json";
pub const SPLIT_FILE: &str = "split.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.csv";

/// Content hash of the tool version string.
pub fn code_version_hash() -> String {
    let v = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
    hex::encode(Sha256::digest(v.as_bytes()))
}

/// Everything needed to rerun and compare one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub name: String,
    pub config: TrainConfig,
    pub code_version: String,
    pub data_dir: PathBuf,
    pub dataset_root_seed: u64,
    pub split_path: PathBuf,
    pub split: SplitManifest,
    pub history_path: PathBuf,
    pub final_report: Option<EvalReport>,
    /// `(epoch, mDice)` of the best evaluated epoch.
    pub best: Option<(usize, f64)>,
    pub uplc_violations: usize,
    pub wall_clock_seconds: f64,
}

impl ExperimentRecord {
    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(RECORD_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn mdice(&self) -> Option<f64> {
        self.final_report.as_ref().map(|r| r.mdice)
    }
}
