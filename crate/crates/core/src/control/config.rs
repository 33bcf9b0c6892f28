//! Policy configuration files.
//!
//! One `key = value` pair per line; `#` starts a comment. Bandwidths accept
//! `KiB`, `MiB` and `GiB` suffixes and are per second.
//!
//! ```text
//! policy = fair_share
//! socket = /tmp/sds-control.sock
//! loop_interval_ms = 1000
//! max_bandwidth = 1GiB
//! demand.tenant1 = 150MiB
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;
use std::{fs, io};

use thiserror::Error;

use crate::num::{parse_bytes, GIB, MIB};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    TailLatency,
    FairShare,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub policy: PolicyKind,
    pub socket: Option<PathBuf>,
    pub loop_interval: Duration,
    pub telemetry: Option<PathBuf>,
    pub kvs_bandwidth: f64,
    pub min_bandwidth: f64,
    pub max_bandwidth: f64,
    /// Demand per stage name.
    pub demands: BTreeMap<String, f64>,
    /// Rescale bucket rates from OS-level counters.
    pub calibrate: bool,
}

pub const DEFAULT_LOOP_INTERVAL: Duration = Duration::from_secs(1);

impl PolicyConfig {
    pub fn new(policy: PolicyKind) -> Self {
        Self {
            policy,
            socket: None,
            loop_interval: DEFAULT_LOOP_INTERVAL,
            telemetry: None,
            kvs_bandwidth: (200 * MIB) as f64,
            min_bandwidth: (10 * MIB) as f64,
            max_bandwidth: GIB as f64,
            demands: BTreeMap::new(),
            calibrate: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        text.parse()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.loop_interval.is_zero() {
            return Err(ConfigError::Invalid("loop interval must be positive".into()));
        }
        match self.policy {
            PolicyKind::TailLatency if self.min_bandwidth > self.kvs_bandwidth => {
                Err(ConfigError::Invalid("min_bandwidth exceeds kvs_bandwidth".into()))
            }
            PolicyKind::FairShare if self.max_bandwidth <= 0.0 => {
                Err(ConfigError::Invalid("max_bandwidth must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for PolicyConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut policy = None;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or_default().trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::Line { line, msg: format!("expected `key = value`, got `{content}`") })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "policy" {
                policy = Some(match v {
                    "tail_latency" => PolicyKind::TailLatency,
                    "fair_share" => PolicyKind::FairShare,
                    _ => return Err(ConfigError::Line { line, msg: format!("unknown policy `{v}`") }),
                });
            } else {
                entries.push((line, k, v));
            }
        }
        let mut cfg = PolicyConfig::new(policy.ok_or_else(|| ConfigError::Invalid("no `policy` key".into()))?);
        for (line, k, v) in entries {
            let err = |msg: String| ConfigError::Line { line, msg };
            let bytes = || parse_bytes(v).ok_or_else(|| err(format!("bad bandwidth `{v}` for `{k}`")));
            match k {
                "socket" => cfg.socket = Some(PathBuf::from(v)),
                "telemetry" => cfg.telemetry = Some(PathBuf::from(v)),
                "loop_interval_ms" => {
                    let ms: u64 = v.parse().map_err(|_| err(format!("bad interval `{v}`")))?;
                    cfg.loop_interval = Duration::from_millis(ms);
                }
                "kvs_bandwidth" => cfg.kvs_bandwidth = bytes()?,
                "min_bandwidth" => cfg.min_bandwidth = bytes()?,
                "max_bandwidth" => cfg.max_bandwidth = bytes()?,
                "calibrate" => {
                    cfg.calibrate = match v {
                        "true" | "1" => true,
                        "false" | "0" => false,
                        _ => return Err(err(format!("bad flag `{v}`"))),
                    }
                }
                _ => match k.strip_prefix("demand.") {
                    Some(name) if !name.is_empty() => {
                        let d = bytes()?;
                        if d <= 0.0 {
                            return Err(err(format!("demand for `{name}` must be positive")));
                        }
                        cfg.demands.insert(name.to_string(), d);
                    }
                    _ => return Err(err(format!("unknown key `{k}`"))),
                },
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
