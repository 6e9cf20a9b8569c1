//! `regal.toml`: every path and knob a run needs, resolved and validated
//! before any subsystem starts.
//!
//! ```text
//! registry = "registry.toml"
//! sources = "sources.toml"
//! data_dir = "data"
//! identity_map = "identities.toml"   # optional
//! policy = "cache_policy.toml"       # optional
//! bucket_granularity = "1h"
//! parallelism = 4
//!
//! [stability]
//! margin = 0.1
//! cooldown = "15m"
//!
//! [[transform]]
//! metric_name = "crash_events"
//! version = 2
//! description = "ignore zero-crash sessions"
//! logic = "positive_only"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use crate::compiler::{CachePolicy, PolicyError};
use crate::ingest::{IngestError, SourcesConfig};
use crate::pushpath::StabilityConfig;
use crate::refine::{GoldContext, TransformCatalog, TransformVersion};
use crate::registry::{Registry, RegistryError};
use crate::serve::{IdentityError, IdentityMap};
use crate::time::duration_str;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Sources(#[from] IngestError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
}

fn default_granularity() -> Duration {
    Duration::from_secs(3600)
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub registry: PathBuf,
    pub sources: PathBuf,
    pub data_dir: PathBuf,
    #[serde(default)]
    pub identity_map: Option<PathBuf>,
    #[serde(default)]
    pub policy: Option<PathBuf>,
    #[serde(default)]
    pub audit_log: Option<PathBuf>,
    #[serde(default)]
    pub webhook_url: Option<String>,
    #[serde(default = "default_granularity", with = "duration_str")]
    pub bucket_granularity: Duration,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub stability: StabilityConfig,
    #[serde(default, rename = "transform")]
    pub transforms: Vec<TransformVersion>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.message().to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.registry);
        fix(&mut self.sources);
        fix(&mut self.data_dir);
        for p in [&mut self.identity_map, &mut self.policy, &mut self.audit_log]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn store_dir(&self) -> PathBuf {
        self.data_dir.join("store")
    }

    pub fn push_dir(&self) -> PathBuf {
        self.data_dir.join("push")
    }

    pub fn audit_path(&self) -> PathBuf {
        self.audit_log
            .clone()
            .unwrap_or_else(|| self.data_dir.join("audit.jsonl"))
    }

    /// Loads every referenced file and checks the whole configuration.
    pub fn resolve(self) -> Result<Resolved, ConfigError> {
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        self.stability.validate().map_err(ConfigError::Invalid)?;
        let registry = Registry::load(&self.registry)?;
        GoldContext {
            registry: &registry,
            catalog: &TransformCatalog::default(),
            granularity: self.bucket_granularity,
        }
        .check_granularity()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut catalog = TransformCatalog::default();
        for t in &self.transforms {
            if registry.series_aggregation(&t.metric_name).is_none() {
                return Err(ConfigError::Invalid(format!(
                    "transform for {} names a series no registry metric reads",
                    t.metric_name
                )));
            }
            catalog
                .register(t.clone())
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let sources = SourcesConfig::load(&self.sources)?;
        let policy = match &self.policy {
            Some(p) => CachePolicy::load(p)?,
            None => CachePolicy::default(),
        };
        let identities = match &self.identity_map {
            Some(p) => IdentityMap::load(p)?,
            None => IdentityMap::default(),
        };
        Ok(Resolved {
            config: self,
            registry,
            sources,
            policy,
            identities,
        })
    }
}

/// A [`RunConfig`] with every referenced file loaded and validated.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub registry: Registry,
    pub sources: SourcesConfig,
    pub policy: CachePolicy,
    pub identities: IdentityMap,
}

impl Resolved {
    pub fn load(path: &Path) -> Result<Resolved, ConfigError> {
        RunConfig::load(path)?.resolve()
    }

    /// Loads `path` with the data directory replaced.
    pub fn load_with_data_dir(path: &Path, data_dir: Option<&Path>) -> Result<Resolved, ConfigError> {
        let mut cfg = RunConfig::load(path)?;
        if let Some(d) = data_dir {
            cfg.data_dir = d.to_path_buf();
        }
        cfg.resolve()
    }
}
