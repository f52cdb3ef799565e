//! Record of one tool invocation, written next to its artifacts.

use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub seed: Option<u64>,
    /// Command line that produced the run, program name excluded.
    pub argv: Vec<String>,
    /// Resolved settings of every component involved.
    pub config: serde_json::Value,
    pub artifacts: PathBuf,
    pub tool_version: String,
    pub passed: Option<bool>,
}

impl RunManifest {
    pub fn new(scenario: impl Into<String>, seed: Option<u64>, argv: Vec<String>, artifacts: impl Into<PathBuf>) -> Self {
        Self {
            scenario: scenario.into(),
            seed,
            argv,
            config: serde_json::Value::Null,
            artifacts: artifacts.into(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            passed: None,
        }
    }

    pub fn with_config<T: Serialize>(mut self, config: &T) -> Self {
        self.config = serde_json::to_value(config).expect("configs serialize");
        self
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)
    }

    pub fn read(path: &Path) -> io::Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join(MANIFEST_FILE);
        let mut m = RunManifest::new("sim", Some(7), vec!["sim".into(), "fig7".into()], dir.path())
            .with_config(&serde_json::json!({"delta_ratio": 0.2}));
        m.passed = Some(true);
        m.write(&path).unwrap();
        assert_eq!(RunManifest::read(&path).unwrap(), m);
    }
}
