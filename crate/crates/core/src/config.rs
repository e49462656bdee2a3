//! Experiment configuration: a TOML file with every default embedded.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::CostParams;
use crate::error::{ConfigError, ConfigIssue};
use crate::platform::PlatformConfig;
use crate::policy::{PolicyConfig, ThresholdMode};
use crate::sim_core::Millis;
use crate::workload::{FunctionProfile, WorkloadConfig};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "MINOS_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One paired run per seed.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Resolution of the cumulative cost time series.
    pub sample_period_ms: Millis,
    pub platform: PlatformConfig,
    pub policy: PolicyConfig,
    pub workload: WorkloadConfig,
    pub function: FunctionProfile,
    pub cost: CostParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1],
            output_dir: PathBuf::from("out"),
            sample_period_ms: 1_000,
            platform: PlatformConfig::default(),
            policy: PolicyConfig::default(),
            workload: WorkloadConfig::default(),
            function: FunctionProfile::default(),
            cost: CostParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        if self.seeds.is_empty() {
            issues.push(ConfigIssue::new("seeds", "at least one seed is required"));
        }
        if self.sample_period_ms == 0 {
            issues.push(ConfigIssue::new("sample_period_ms", "must be > 0"));
        }
        issues.extend(self.platform.validate("platform"));
        issues.extend(validate_policy(&self.policy));
        issues.extend(self.workload.validate("workload"));
        issues.extend(self.function.validate("function"));
        issues.extend(self.cost.validate("cost"));
        issues
    }

    /// Digest of everything both arms of a paired run must share.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Shared<'a> {
            platform: &'a PlatformConfig,
            workload: &'a WorkloadConfig,
            function: &'a FunctionProfile,
            cost: &'a CostParams,
            sample_period_ms: Millis,
        }
        let json = serde_json::to_vec(&Shared {
            platform: &self.platform,
            workload: &self.workload,
            function: &self.function,
            cost: &self.cost,
            sample_period_ms: self.sample_period_ms,
        })
        .expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        validate_config_with(&raw, overrides)
    }
}

fn validate_policy(p: &PolicyConfig) -> Vec<ConfigIssue> {
    let mut issues = Vec::new();
    let mut bad = |k: &str, m: &str| issues.push(ConfigIssue::new(format!("policy.{k}"), m));
    if p.retry_cap == 0 {
        bad("retry_cap", "must be >= 1");
    }
    if !(p.pass_fraction > 0.0 && p.pass_fraction <= 1.0) {
        bad("pass_fraction", "must be in (0, 1]");
    }
    if p.threshold_mode == ThresholdMode::Online && p.pass_fraction >= 1.0 {
        bad("pass_fraction", "online mode needs a pass fraction below 1");
    }
    if !(p.benchmark_noise_sigma.is_finite() && p.benchmark_noise_sigma >= 0.0) {
        bad("benchmark_noise_sigma", "must be >= 0");
    }
    match p.fixed_threshold_ms {
        Some(t) if t.is_nan() || t <= 0.0 => bad("fixed_threshold_ms", "must be > 0"),
        None if p.threshold_mode == ThresholdMode::Fixed => bad("fixed_threshold_ms", "required when threshold_mode = \"fixed\""),
        _ => {}
    }
    if p.online_tick_ms == 0 {
        bad("online_tick_ms", "must be > 0");
    }
    if let Some(w) = p.online_outage {
        if w.end_ms < w.start_ms {
            bad("online_outage.end_ms", "must be >= start_ms");
        }
    }
    issues
}

/// Parse and validate a TOML config.
pub fn validate_config(raw: &str) -> Result<ExperimentConfig, ConfigError> {
    validate_config_with(raw, &[])
}

/// Parse a TOML config, apply `key = value` overrides (dotted keys, values in
/// TOML syntax or bare strings), and validate the result.
pub fn validate_config_with(raw: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig, ConfigError> {
    let mut table: toml::Table = toml::from_str(raw).map_err(|e| ConfigError::Parse(e.to_string()))?;
    for (key, value) in overrides {
        apply_override(&mut table, key, value)?;
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let message = e.into_inner().to_string();
        let first_line = message.lines().next().unwrap_or_default().trim().to_string();
        ConfigError::Invalid(vec![ConfigIssue::new(path, first_line)])
    })?;
    let issues = config.validate();
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Invalid(issues))
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set `dotted.key` in `table` to the parsed `value`, creating tables on the way.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Invalid(vec![ConfigIssue::new(key, "malformed override key")]));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            ConfigError::Invalid(vec![ConfigIssue::new(key, format!("`{p}` is not a table"))])
        })?;
    }
    cur.insert(last.to_string(), parse_override_value(value));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn issue_keys(err: ConfigError) -> Vec<String> {
        match err {
            ConfigError::Invalid(issues) => issues.into_iter().map(|i| i.key).collect(),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn default_round_trips_through_toml() {
        let d = ExperimentConfig::default();
        assert!(d.validate().is_empty());
        assert_eq!(validate_config(&d.to_toml()).unwrap(), d);
        assert_eq!(validate_config("").unwrap(), d);
    }

    #[test]
    fn retry_cap_zero_rejected() {
        let err = validate_config("[policy]\nretry_cap = 0\n").unwrap_err();
        assert_eq!(issue_keys(err), vec!["policy.retry_cap"]);
    }

    #[test]
    fn forty_percent_pass_fraction_accepted() {
        let c = validate_config("[policy]\npass_fraction = 0.4\n").unwrap();
        assert_eq!(c.policy.pass_fraction, 0.4);
    }

    #[test]
    fn unknown_distribution_lists_supported_names() {
        let err = validate_config("[platform]\nperf_distribution = { kind = \"weibull\", k = 1.0 }\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("platform.perf_distribution"), "{msg}");
        for name in crate::platform::Distribution::NAMES {
            assert!(msg.contains(name), "{msg} lacks {name}");
        }
    }

    #[test]
    fn unknown_key_named() {
        let err = validate_config("[workload]\nvus = 3\n").unwrap_err();
        assert!(err.to_string().contains("vus"), "{err}");
    }

    #[test]
    fn several_issues_reported_together() {
        let err = validate_config(
            "seeds = []\n[workload]\nduration_ms = 0\n[platform]\nperf_distribution = { kind = \"lognormal\", median = 1.0, sigma = -1.0 }\n",
        )
        .unwrap_err();
        let keys = issue_keys(err);
        assert!(keys.contains(&"seeds".to_string()));
        assert!(keys.contains(&"workload.duration_ms".to_string()));
        assert!(keys.contains(&"platform.perf_distribution.sigma".to_string()));
    }

    #[test]
    fn fixed_mode_requires_threshold() {
        let err = validate_config("[policy]\nthreshold_mode = \"fixed\"\n").unwrap_err();
        assert_eq!(issue_keys(err), vec!["policy.fixed_threshold_ms"]);
    }

    #[test]
    fn overrides_apply_before_validation() {
        let overrides = vec![
            ("policy.retry_cap".to_string(), "8".to_string()),
            ("platform.perf_distribution.sigma".to_string(), "0.2".to_string()),
            ("policy.threshold_mode".to_string(), "online".to_string()),
        ];
        let raw = ExperimentConfig::default().to_toml();
        let c = validate_config_with(&raw, &overrides).unwrap();
        assert_eq!(c.policy.retry_cap, 8);
        assert_eq!(c.policy.threshold_mode, ThresholdMode::Online);
        assert_eq!(c.platform.perf_distribution, crate::platform::Distribution::lognormal(1.0, 0.2));
    }

    #[test]
    fn digest_ignores_policy_and_seeds() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.policy.enabled = false;
        b.seeds = vec![4, 5];
        assert_eq!(a.digest(), b.digest());
        b.platform.node_capacity += 1;
        assert_ne!(a.digest(), b.digest());
    }
}
