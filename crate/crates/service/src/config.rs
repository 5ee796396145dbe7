use std::path::{Path, PathBuf};

use ringwatch_core::detector::{ReconcileScope, ScoringConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable naming the config file. It is the only setting read
/// from the environment.
pub const CONFIG_ENV: &str = "RINGWATCH_CONFIG";

pub const SAMPLE_RATE_MIN: f64 = 0.01;
pub const SAMPLE_RATE_MAX: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub edge_threshold: f64,
    pub auto_block: f64,
    pub manual_floor: f64,
    pub sample_rate: f64,
    /// Let batch highlights above `auto_block` block automatically.
    pub batch_auto_block: bool,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            edge_threshold: 0.8,
            auto_block: 0.95,
            manual_floor: 0.5,
            sample_rate: 0.05,
            batch_auto_block: false,
        }
    }
}

/// Cadences are in event time (milliseconds of `registered_at`), so a replay
/// of the same log triggers them at the same points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cadence {
    pub reconcile_interval_ms: i64,
    /// Reconcile early once this many merge tickets are pending.
    pub max_pending_tickets: usize,
    pub reconcile_scope: ReconcileScope,
    /// 0 disables the periodic batch flow.
    pub batch_interval_ms: i64,
    /// Sample the previous day's highlights when event time crosses midnight.
    pub sample_daily: bool,
}

impl Default for Cadence {
    fn default() -> Self {
        Cadence {
            reconcile_interval_ms: 60_000,
            max_pending_tickets: 64,
            reconcile_scope: ReconcileScope::Affected,
            batch_interval_ms: 3_600_000,
            sample_daily: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    /// fsync after every append.
    Always,
    /// Hand the write to the OS; survives a process crash, not power loss.
    OsBuffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub thresholds: Thresholds,
    pub cadence: Cadence,
    pub scoring: ScoringConfig,
    pub schema_path: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    /// Journal directory; `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub sync: SyncMode,
    pub listen: String,
    /// Bearer token for review endpoints; `None` leaves them open.
    pub reviewer_token: Option<String>,
    /// Drop blocked users from candidate generation. Off by default so new
    /// accounts still link to a blocked ring.
    pub exclude_blocked_candidates: bool,
    /// Exact-class attributes shown to reviewers only as keyed digests.
    pub redact_attributes: Vec<String>,
    pub monitoring_seed: u64,
    pub retry_attempts: u32,
    pub retry_backoff_ms: u64,
    pub latency_window: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            thresholds: Thresholds::default(),
            cadence: Cadence::default(),
            scoring: ScoringConfig::default(),
            schema_path: None,
            model_path: None,
            data_dir: None,
            sync: SyncMode::Always,
            listen: "127.0.0.1:8080".into(),
            reviewer_token: None,
            exclude_blocked_candidates: false,
            redact_attributes: vec!["ip".into(), "device_id".into()],
            monitoring_seed: 7,
            retry_attempts: 3,
            retry_backoff_ms: 20,
            latency_window: 10_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("sample_rate {0} outside [{SAMPLE_RATE_MIN}, {SAMPLE_RATE_MAX}]")]
    SampleRate(f64),
    #[error("edge_threshold {0} must lie strictly between 0 and 1")]
    EdgeThreshold(f64),
    #[error("need 0 <= manual_floor ({floor}) <= auto_block ({auto}) < 1")]
    Bands { floor: f64, auto: f64 },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ServiceConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            source: Box::new(e),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ServiceConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(e),
        })?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.schema_path, &mut cfg.model_path, &mut cfg.data_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads the file named by `RINGWATCH_CONFIG`, or the defaults if unset.
    pub fn from_env() -> Result<Self, ConfigError> {
        match std::env::var_os(CONFIG_ENV) {
            Some(p) => Self::load(Path::new(&p)),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.thresholds;
        if !(SAMPLE_RATE_MIN..=SAMPLE_RATE_MAX).contains(&t.sample_rate) {
            return Err(ConfigError::SampleRate(t.sample_rate));
        }
        if !(t.edge_threshold > 0.0 && t.edge_threshold < 1.0) {
            return Err(ConfigError::EdgeThreshold(t.edge_threshold));
        }
        if !(0.0 <= t.manual_floor && t.manual_floor <= t.auto_block && t.auto_block < 1.0) {
            return Err(ConfigError::Bands {
                floor: t.manual_floor,
                auto: t.auto_block,
            });
        }
        if self.cadence.reconcile_interval_ms <= 0 {
            return Err(ConfigError::NonPositive("reconcile_interval_ms"));
        }
        if self.cadence.batch_interval_ms < 0 {
            return Err(ConfigError::NonPositive("batch_interval_ms"));
        }
        if self.latency_window == 0 {
            return Err(ConfigError::NonPositive("latency_window"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ServiceConfig::default().validate().unwrap();
    }

    #[test]
    fn sample_rate_band() {
        let parse = |rate: f64| ServiceConfig::from_toml(&format!("[thresholds]\nsample_rate = {rate}\n"));
        assert!(matches!(parse(0.0), Err(ConfigError::SampleRate(_))));
        assert!(matches!(parse(0.2), Err(ConfigError::SampleRate(_))));
        assert_eq!(parse(0.10).unwrap().thresholds.sample_rate, 0.10);
        assert_eq!(parse(0.01).unwrap().thresholds.sample_rate, 0.01);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ServiceConfig::from_toml("listen = \"0.0.0.0:9000\"\n[cadence]\nreconcile_scope = \"full\"\n").unwrap();
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.cadence.reconcile_scope, ReconcileScope::Full);
        assert_eq!(cfg.thresholds.auto_block, 0.95);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ServiceConfig::from_toml("autoblock = 0.9\n"), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svc.toml");
        std::fs::write(&path, "model_path = \"model.json\"\ndata_dir = \"/abs/data\"\n").unwrap();
        let cfg = ServiceConfig::load(&path).unwrap();
        assert_eq!(cfg.model_path.unwrap(), dir.path().join("model.json"));
        assert_eq!(cfg.data_dir.unwrap(), PathBuf::from("/abs/data"));
    }
}
