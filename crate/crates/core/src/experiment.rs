//! Paired baseline/Minos experiments over a list of seeds.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{ReportError, SimError, StatsError};
use crate::policy::{calibrate_pretest, ElysiumThreshold, PolicyMode, ThresholdMode};
use crate::reporting::{self, ComparisonReport, RunSummary};
use crate::simulation::{simulate, RunOutput, RunSpec};
use crate::workload::{run_pretest, PretestError};

/// Salt shared by both arms so they see the same placement and noise streams.
pub const MAIN_SALT: u64 = 0;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("simulation invariant violated: {0}")]
    Sim(#[from] SimError),
    #[error("pre-test failed: {0}")]
    Pretest(#[from] PretestError),
    #[error("calibration failed: {0}")]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// True when the failure is an invariant violation rather than I/O.
    pub fn is_invariant(&self) -> bool {
        matches!(self, Self::Sim(_) | Self::Pretest(PretestError::Sim(_)))
    }
}

#[derive(Debug, Clone)]
pub struct PretestOutcome {
    pub scores: Vec<f64>,
    pub threshold: ElysiumThreshold,
}

/// Run the pre-test for `seed` and calibrate a threshold from it.
pub fn pretest(config: &ExperimentConfig, seed: u64) -> Result<PretestOutcome, ExperimentError> {
    let results = run_pretest(&config.platform, &config.policy, &config.workload, &config.function, seed)?;
    let scores: Vec<f64> = results.iter().map(|r| r.score).collect();
    let threshold = calibrate_pretest(&scores, config.policy.pass_fraction)?;
    Ok(PretestOutcome { scores, threshold })
}

/// Threshold the Minos arm starts with, or `None` when the policy is off.
pub fn initial_threshold(config: &ExperimentConfig, seed: u64) -> Result<Option<ElysiumThreshold>, ExperimentError> {
    let p = &config.policy;
    if !p.enabled {
        return Ok(None);
    }
    let t = match p.threshold_mode {
        ThresholdMode::Fixed => ElysiumThreshold::new(p.fixed_threshold_ms.unwrap_or(f64::INFINITY), p.pass_fraction),
        ThresholdMode::PreTest => pretest(config, seed)?.threshold,
        ThresholdMode::Online => match p.fixed_threshold_ms {
            Some(v) => ElysiumThreshold::new(v, p.pass_fraction),
            None => ElysiumThreshold::accept_all(),
        },
    };
    Ok(Some(t))
}

/// Simulate one arm of a paired run.
pub fn run_arm(
    config: &ExperimentConfig,
    seed: u64,
    mode: PolicyMode,
    threshold: ElysiumThreshold,
) -> Result<RunOutput, SimError> {
    simulate(&RunSpec {
        platform: &config.platform,
        policy: &config.policy,
        function: &config.function,
        mode,
        threshold,
        vu_count: config.workload.vu_count,
        think_time_ms: config.workload.think_time_ms,
        duration_ms: config.workload.duration_ms,
        seed,
        salt: MAIN_SALT,
    })
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub threshold: Option<ElysiumThreshold>,
    pub minos: RunOutput,
    pub baseline: RunOutput,
    pub minos_summary: RunSummary,
    pub baseline_summary: RunSummary,
    pub comparison: ComparisonReport,
}

/// Pre-test (if needed), Minos run, baseline run, summaries and comparison.
pub fn run_seed(config: &ExperimentConfig, seed: u64, policy_disabled: bool) -> Result<SeedResult, ExperimentError> {
    let threshold = if policy_disabled { None } else { initial_threshold(config, seed)? };
    let (mode, start) = match threshold {
        Some(t) => (PolicyMode::Enforce, t),
        None => (PolicyMode::Disabled, ElysiumThreshold::accept_all()),
    };
    let minos = run_arm(config, seed, mode, start)?;
    let baseline = run_arm(config, seed, PolicyMode::Disabled, ElysiumThreshold::accept_all())?;

    let digest = config.digest();
    let summary = |run: &RunOutput, t: Option<f64>| {
        reporting::summarize_run(run, t, &digest, &config.cost, config.sample_period_ms)
    };
    let minos_summary = summary(&minos, threshold.map(|t| t.value))?;
    let baseline_summary = summary(&baseline, None)?;
    let comparison = reporting::compare(&baseline_summary, &minos_summary)?;
    Ok(SeedResult {
        seed,
        threshold,
        minos,
        baseline,
        minos_summary,
        baseline_summary,
        comparison,
    })
}

/// Run every seed (in parallel) and write all outputs to `out_dir`.
///
/// Per seed: `trace_{minos,baseline}_seed{n}.csv`,
/// `summary_{minos,baseline}_seed{n}.json` and `timeseries_seed{n}.csv`;
/// plus one `comparison.csv` with a row per seed.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    policy_disabled: bool,
) -> Result<Vec<SeedResult>, ExperimentError> {
    let results: Vec<SeedResult> = config
        .seeds
        .par_iter()
        .map(|&seed| run_seed(config, seed, policy_disabled))
        .collect::<Result<_, _>>()?;

    std::fs::create_dir_all(out_dir).map_err(|source| ExperimentError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    for r in &results {
        write_seed(out_dir, r)?;
    }
    let rows: Vec<ComparisonReport> = results.iter().map(|r| r.comparison.clone()).collect();
    let path = out_dir.join("comparison.csv");
    reporting::write_comparison_csv(create(&path)?, &rows)?;
    Ok(results)
}

fn create(path: &Path) -> Result<BufWriter<File>, ExperimentError> {
    File::create(path).map(BufWriter::new).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Names of the files written for one seed, in write order.
pub fn seed_file_names(seed: u64) -> [String; 5] {
    [
        format!("trace_minos_seed{seed}.csv"),
        format!("trace_baseline_seed{seed}.csv"),
        format!("summary_minos_seed{seed}.json"),
        format!("summary_baseline_seed{seed}.json"),
        format!("timeseries_seed{seed}.csv"),
    ]
}

fn write_seed(out_dir: &Path, r: &SeedResult) -> Result<(), ExperimentError> {
    let [tm, tb, sm, sb, ts] = seed_file_names(r.seed).map(|n| out_dir.join(n));
    reporting::write_trace_csv(create(&tm)?, &r.minos.trace)?;
    reporting::write_trace_csv(create(&tb)?, &r.baseline.trace)?;
    for (path, summary) in [(sm, &r.minos_summary), (sb, &r.baseline_summary)] {
        let mut w = create(&path)?;
        serde_json::to_writer_pretty(&mut w, summary).map_err(ReportError::from)?;
        w.flush().map_err(|source| ExperimentError::Io { path, source })?;
    }
    reporting::write_timeseries_csv(
        create(&ts)?,
        r.minos_summary.sample_period_ms,
        &r.baseline_summary.cost_per_success_series,
        &r.minos_summary.cost_per_success_series,
    )?;
    Ok(())
}
