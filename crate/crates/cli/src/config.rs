use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use mislabel_core::injection::GroupWeights;
use mislabel_core::review::ReviewSetOptions;
use mislabel_core::{PipelineConfig, SyntheticConfig};

pub const MANIFEST_NAME: &str = "run_manifest.json";

/// Every tunable of an experiment in one JSON file. Each command reads the
/// sections it needs; missing fields take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolConfig {
    pub synthetic: SyntheticConfig,
    pub injection: InjectionConfig,
    pub pipeline: PipelineConfig,
    pub review: ReviewSetOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionConfig {
    pub rate: f64,
    pub weights: GroupWeights,
    pub seed: u64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            rate: 0.05,
            weights: GroupWeights::default(),
            seed: 0,
        }
    }
}

impl ToolConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| mislabel_core::Error::Io {
                path: path.to_owned(),
                source: e,
            })?;
        let cfg = serde_json::from_str(&text)
            .map_err(|e| mislabel_core::Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

/// Provenance record written beside every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub argv: Vec<String>,
    pub config: ToolConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub duration_ms: u128,
}

impl RunManifest {
    pub fn new(command: &str, config: &ToolConfig) -> Self {
        Self {
            command: command.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            argv: std::env::args().collect(),
            config: config.clone(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            duration_ms: 0,
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_owned(), value);
        self
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.inputs.insert(name.to_owned(), path.to_owned());
        self
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.outputs.push(path.into());
        self
    }

    pub fn write(&mut self, dir: &Path, elapsed: Duration) -> anyhow::Result<PathBuf> {
        self.duration_ms = elapsed.as_millis();
        let path = dir.join(MANIFEST_NAME);
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
