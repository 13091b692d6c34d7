use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use monet_core::model::MonetArch;
use monet_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Outputs {
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Everything needed to rerun a training job.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config: TrainConfig,
    pub arch: MonetArch,
    pub seed: u64,
    pub data: String,
    pub threads: usize,
    pub source_revision: String,
    pub resumed_from: Option<PathBuf>,
    pub first_step: u64,
    pub final_step: u64,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub outputs: Outputs,
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = Self::path(run_dir);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn source_revision() -> String {
    let rev = option_env!("MONET_SOURCE_REV").unwrap_or("unknown");
    format!("monet {} ({rev})", env!("CARGO_PKG_VERSION"))
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
