//! TOML configuration shared by every process role.
//!
//! Every section is optional; missing keys take the calibrated defaults. The
//! canonical example lives at `config/default.toml` in the repository root.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostError, CostModel};
use crate::model::{CatalogEntry, GpuCatalog, ModelError, ResourceRequest};

/// Environment variable that overrides `cost.time_scale`.
pub const TIME_SCALE_ENV: &str = "PCM_TIME_SCALE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSettings {
    pub heartbeat_interval_seconds: f64,
    pub heartbeat_timeout_seconds: f64,
    pub max_concurrent_peer_serves: u32,
    pub peer_transfer: bool,
}

impl Default for SchedulerSettings {
    fn default() -> Self {
        SchedulerSettings {
            heartbeat_interval_seconds: 5.0,
            heartbeat_timeout_seconds: 15.0,
            max_concurrent_peer_serves: 4,
            peer_transfer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ports {
    /// Worker-facing framed TCP listener of the scheduler.
    pub scheduler: u16,
    /// HTTP control plane of the scheduler.
    pub http: u16,
    /// HTTP endpoint of the shared-filesystem emulator.
    pub fs: u16,
    /// First peer-transfer port handed to spawned workers; 0 picks ephemeral ports.
    pub peer_base: u16,
}

impl Default for Ports {
    fn default() -> Self {
        Ports {
            scheduler: 9310,
            http: 9311,
            fs: 9312,
            peer_base: 0,
        }
    }
}

impl Ports {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fixed = [("scheduler", self.scheduler), ("http", self.http), ("fs", self.fs)];
        for (i, a) in fixed.iter().enumerate() {
            for b in &fixed[i + 1..] {
                if a.1 != 0 && a.1 == b.1 {
                    return Err(ConfigError::PortClash(a.0, b.0, a.1));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub cost: CostModel,
    pub scheduler: SchedulerSettings,
    pub worker_capacity: ResourceRequest,
    pub task_resources: ResourceRequest,
    pub ports: Ports,
    #[serde(rename = "gpu")]
    pub gpus: Vec<CatalogEntry>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            cost: CostModel::default(),
            scheduler: SchedulerSettings::default(),
            worker_capacity: ResourceRequest::default_worker(),
            task_resources: ResourceRequest::default_task(),
            ports: Ports::default(),
            gpus: GpuCatalog::standard().entries,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{TIME_SCALE_ENV}={0:?} is not a positive number")]
    BadEnv(String),
    #[error("ports {0} and {1} are both {2}")]
    PortClash(&'static str, &'static str, u16),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` and applies the environment override.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        self.apply_time_scale_override(std::env::var(TIME_SCALE_ENV).ok().as_deref())
    }

    pub fn apply_time_scale_override(&mut self, value: Option<&str>) -> Result<(), ConfigError> {
        if let Some(raw) = value {
            match raw.trim().parse::<f64>() {
                Ok(v) if v > 0.0 && v.is_finite() => self.cost.time_scale = v,
                _ => return Err(ConfigError::BadEnv(raw.to_string())),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.cost.validate()?;
        self.catalog().validate()?;
        self.worker_capacity.validate()?;
        self.task_resources.validate()?;
        self.ports.validate()
    }

    pub fn catalog(&self) -> GpuCatalog {
        GpuCatalog {
            entries: self.gpus.clone(),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
