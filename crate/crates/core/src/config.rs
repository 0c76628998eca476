//! Workspace configuration and directory layout.
//!
//! A workspace is a directory holding `manifests/`, `images/`,
//! `runs/<model_id>/`, `reports/` and `triage/`, optionally with a
//! `scenario.toml` carrying defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamorph::{DatamorphError, DatamorphismSpec, Operator};
use crate::evaluate::DiagnosisConfig;

pub const CONFIG_FILE: &str = "scenario.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error(transparent)]
    Operator(#[from] DatamorphError),
    #[error("invalid setting: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defaults {
    pub seed: u64,
    pub iou: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub bootstrap: usize,
    pub confidence: f64,
}

impl Default for Defaults {
    fn default() -> Self {
        let d = DiagnosisConfig::default();
        Defaults {
            seed: d.seed,
            iou: d.iou_threshold,
            delta: d.delta,
            epsilon: 1.0,
            bootstrap: d.bootstrap,
            confidence: d.confidence,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkspaceConfig {
    /// Workspace root; relative paths resolve against the config file's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub defaults: Defaults,
    /// Parameter overrides keyed by operator name.
    pub operators: BTreeMap<String, BTreeMap<String, f64>>,
}

impl WorkspaceConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: WorkspaceConfig =
            toml::from_str(text).map_err(|source| ConfigError::Parse { path: origin.to_path_buf(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::parse(&text, path)?;
        if let (Some(root), Some(dir)) = (&cfg.root, path.parent()) {
            if root.is_relative() {
                cfg.root = Some(dir.join(root));
            }
        }
        Ok(cfg)
    }

    /// Reads `scenario.toml` from `dir` if present, else the defaults.
    pub fn load_or_default(dir: &Path) -> Result<Self, ConfigError> {
        let path = dir.join(CONFIG_FILE);
        if path.exists() {
            Self::load(&path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.defaults;
        if !(d.epsilon >= 0.0) {
            return Err(ConfigError::Invalid(format!("epsilon {} must be >= 0", d.epsilon)));
        }
        self.diagnosis().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for name in self.operators.keys() {
            self.spec(name.parse()?)?;
        }
        Ok(())
    }

    pub fn diagnosis(&self) -> DiagnosisConfig {
        let d = &self.defaults;
        DiagnosisConfig {
            iou_threshold: d.iou,
            delta: d.delta,
            bootstrap: d.bootstrap,
            confidence: d.confidence,
            seed: d.seed,
            target: None,
        }
    }

    /// Operator with this workspace's overrides applied.
    pub fn spec(&self, op: Operator) -> Result<DatamorphismSpec, ConfigError> {
        let overrides = self
            .operators
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(op.name()))
            .map(|(_, v)| v.clone())
            .unwrap_or_default();
        Ok(DatamorphismSpec::with_params(op, &overrides)?)
    }

    pub fn layout(&self, fallback_root: &Path) -> Layout {
        Layout::new(self.root.clone().unwrap_or_else(|| fallback_root.to_path_buf()))
    }
}

/// Fixed directory layout of a workspace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, model_id: &str) -> PathBuf {
        self.runs().join(model_id)
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn triage(&self) -> PathBuf {
        self.root.join("triage")
    }

    pub fn triage_file(&self) -> PathBuf {
        self.triage().join("triage.json")
    }

    pub fn create(&self) -> std::io::Result<()> {
        for d in [self.manifests(), self.images(), self.runs(), self.reports(), self.triage()] {
            fs::create_dir_all(d)?;
        }
        Ok(())
    }
}
