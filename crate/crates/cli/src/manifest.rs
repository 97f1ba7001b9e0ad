use std::path::Path;

use anyhow::Context;
use chrono::{DateTime, Utc};
use serde::Serialize;

use segmatch::train::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn version() -> String {
    match option_env!("SEGMATCH_GIT_DESCRIBE") {
        Some(rev) => format!("{} ({rev})", env!("CARGO_PKG_VERSION")),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Provenance of one training run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub command_line: Vec<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn start(cfg: &TrainConfig, started: DateTime<Utc>) -> anyhow::Result<Self> {
        Ok(Self {
            config_hash: cfg.config_hash(),
            seed: cfg.seed,
            version: version(),
            command_line: std::env::args().collect(),
            started_at: started.to_rfc3339(),
            finished_at: None,
            status: "running".into(),
            config: cfg.clone(),
        })
    }

    pub fn finish(&mut self, status: String) {
        self.finished_at = Some(Utc::now().to_rfc3339());
        self.status = status;
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}
