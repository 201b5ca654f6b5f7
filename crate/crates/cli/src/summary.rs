use std::collections::BTreeMap;
use std::path::Path;

use epiad::{Error, Result};
use serde::Serialize;
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use crate::config::RunConfig;

/// `summary.json`, written last by every command with an output directory.
/// `timestamp` is the only field that changes between identical runs.
#[derive(Debug, Serialize)]
pub struct Summary {
    command: String,
    version: String,
    config_hash: String,
    config: RunConfig,
    artifacts: Vec<String>,
    metrics: BTreeMap<String, f64>,
    timestamp: String,
}

impl Summary {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let mut config = cfg.clone();
        config.paths = Default::default();
        Summary {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            config,
            artifacts: Vec::new(),
            metrics: BTreeMap::new(),
            timestamp: String::new(),
        }
    }

    pub fn artifact(&mut self, name: &str) -> &mut Self {
        self.artifacts.push(name.to_string());
        self
    }

    pub fn metric(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn write(&mut self, dir: &Path) -> Result<()> {
        self.timestamp = OffsetDateTime::now_utc()
            .format(&Rfc3339)
            .expect("UTC timestamps format");
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(self).expect("summary serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| Error::IoAt { path, source: e })
    }
}
