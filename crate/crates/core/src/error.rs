use thiserror::Error;

use crate::sim_core::Millis;

/// Errors raised by the simulation engine and the models running on it.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("event scheduled in the past: fire_at={fire_at} < now={now}")]
    ScheduleInPast { fire_at: Millis, now: Millis },
    #[error("event popped out of order: fire_at={fire_at} seq={seq}")]
    OutOfOrder { fire_at: Millis, seq: u64 },
    #[error("invariant violated at t={at}: {what}")]
    Invariant { at: Millis, what: String },
}

/// Errors from statistics and calibration helpers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sample set is empty")]
    Empty,
    #[error("need at least {needed} observations, have {have}")]
    NotEnoughObservations { needed: u64, have: u64 },
    #[error("quantile {0} outside (0, 1]")]
    BadQuantile(f64),
}

/// A single config validation failure, naming the offending key.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{key}: {message}")]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl ConfigIssue {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("invalid config:\n{}", .0.iter().map(|i| format!("  - {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ConfigIssue>),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("no successful invocations; cost per success undefined")]
    NoSuccesses,
    #[error("summaries are not comparable: {0}")]
    Mismatch(String),
    #[error("attempt {invocation_id}/{attempt_index} is still in flight")]
    InFlight { invocation_id: u64, attempt_index: u32 },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace verification failed:\n{}", .0.join("\n"))]
    Verify(Vec<String>),
}
