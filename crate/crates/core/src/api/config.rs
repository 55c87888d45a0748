use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Service settings, read from TOML. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    /// JSON-lines document store.
    pub documents: PathBuf,
    pub index: PathBuf,
    /// One subdirectory per model bundle; the directory name is the id.
    pub bundles: PathBuf,
    pub projects: PathBuf,
    pub flows: PathBuf,
    /// Directory `events_ref` names are resolved in.
    pub events: PathBuf,
    pub default_bundle: String,
    pub max_body_bytes: usize,
    pub deid_config: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self::rooted(Path::new("data"))
    }
}

impl ServiceConfig {
    /// Default layout under `root`.
    pub fn rooted(root: &Path) -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            documents: root.join("documents.jsonl"),
            index: root.join("index"),
            bundles: root.join("bundles"),
            projects: root.join("projects"),
            flows: root.join("flows"),
            events: root.join("events"),
            default_bundle: "default".into(),
            max_body_bytes: 8 << 20,
            deid_config: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: ServiceConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if let Some(base) = path.parent() {
            cfg.resolve(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.documents,
            &mut self.index,
            &mut self.bundles,
            &mut self.projects,
            &mut self.flows,
            &mut self.events,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = &mut self.deid_config {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_body_bytes == 0 {
            return Err(ConfigError::Invalid("max_body_bytes must be positive".into()));
        }
        if self.default_bundle.is_empty() {
            return Err(ConfigError::Invalid("default_bundle is empty".into()));
        }
        Ok(())
    }
}
