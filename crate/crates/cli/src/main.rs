use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use minos_core::config::{validate_config_with, OUTPUT_DIR_ENV};
use minos_core::experiment::{self, ExperimentError};
use minos_core::reporting::{read_trace_csv, verify_trace};
use minos_core::{ConfigError, ExperimentConfig, ReportError, RunSummary};

/// Simulate FaaS instance selection by benchmark-and-terminate and compare it
/// against a plain platform.
#[derive(Parser)]
#[command(name = "minos", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run paired baseline/policy experiments for every configured seed.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Disable the policy in the policy arm too (both arms become baselines).
        #[arg(long)]
        policy_disabled: bool,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long, env = OUTPUT_DIR_ENV)]
        output_dir: Option<PathBuf>,
    },
    /// Run only the pre-test and print the calibrated threshold per seed.
    Pretest {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also print every collected score.
        #[arg(long)]
        scores: bool,
    },
    /// Print the full default configuration.
    PrintDefaultConfig,
    /// Re-check every invariant on an existing trace file.
    Verify {
        /// Trace CSV written by `run`.
        trace: PathBuf,
        /// Summary JSON to cross-check against the trace.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; defaults are used for missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides as `--section.key value` pairs, e.g. `--policy.retry_cap 3`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

enum Failure {
    Config(anyhow::Error),
    Invariant(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) | Failure::Other(_) => 1,
            Failure::Invariant(_) => 2,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_invariant() {
            Failure::Invariant(e.into())
        } else {
            Failure::Other(e.into())
        }
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(Failure::Config(anyhow!("expected `--key value`, found `{arg}`")));
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let value = it
                    .next()
                    .ok_or_else(|| Failure::Config(anyhow!("missing value for `--{key}`")))?;
                (key.to_string(), value.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

/// Remove a boolean flag that ended up among the trailing overrides.
fn take_flag(overrides: &mut Vec<String>, flag: &str) -> bool {
    let before = overrides.len();
    overrides.retain(|a| a != flag);
    overrides.len() != before
}

/// Remove `flag value` or `flag=value` from the trailing overrides.
fn take_value(overrides: &mut Vec<String>, flag: &str) -> Result<Option<String>, Failure> {
    let prefix = format!("{flag}=");
    if let Some(i) = overrides.iter().position(|a| a.starts_with(&prefix)) {
        return Ok(Some(overrides.remove(i)[prefix.len()..].to_string()));
    }
    match overrides.iter().position(|a| a == flag) {
        Some(i) if i + 1 < overrides.len() => {
            let v = overrides.remove(i + 1);
            overrides.remove(i);
            Ok(Some(v))
        }
        Some(_) => Err(Failure::Config(anyhow!("missing value for `{flag}`"))),
        None => Ok(None),
    }
}

fn load(args: &mut ConfigArgs) -> Result<ExperimentConfig, Failure> {
    for flag in ["--config", "-c"] {
        if let Some(path) = take_value(&mut args.overrides, flag)? {
            args.config = Some(path.into());
        }
    }
    load_parsed(args)
}

fn load_parsed(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let overrides = parse_overrides(&args.overrides)?;
    let config = match &args.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => validate_config_with("", &overrides)?,
    };
    Ok(config)
}

fn run(config: &ExperimentConfig, out_dir: &Path, policy_disabled: bool) -> Result<(), Failure> {
    let results = experiment::run_experiment(config, out_dir, policy_disabled)?;
    for r in &results {
        let c = &r.comparison;
        println!(
            "seed {}: compute {:+.2}%, successes {} vs {} ({:+.2}%), cost/1M {:.2} vs {:.2} ({:+.2}%), cheaper {:.1}% of the time",
            c.seed,
            c.compute_speedup_pct,
            c.minos_successful,
            c.baseline_successful,
            c.success_delta_pct,
            c.minos_cost_per_million,
            c.baseline_cost_per_million,
            c.cost_delta_pct,
            c.fraction_of_time_cheaper * 100.0,
        );
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn pretest(config: &ExperimentConfig, scores: bool) -> Result<(), Failure> {
    for &seed in &config.seeds {
        let out = experiment::pretest(config, seed)?;
        println!(
            "seed {seed}: {} scores, threshold {:.3} ms (pass fraction {})",
            out.scores.len(),
            out.threshold.value,
            out.threshold.target_pass_fraction
        );
        if scores {
            for s in &out.scores {
                println!("  {s}");
            }
        }
    }
    Ok(())
}

fn verify(trace: &Path, summary: Option<&Path>, config: &ExperimentConfig) -> Result<(), Failure> {
    let file = File::open(trace).with_context(|| format!("cannot open {}", trace.display()))?;
    let records = read_trace_csv(file).with_context(|| format!("cannot read {}", trace.display()))?;
    let summary: Option<RunSummary> = summary
        .map(|p| -> anyhow::Result<RunSummary> {
            let bytes = std::fs::read(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("cannot parse {}", p.display()))
        })
        .transpose()?;
    match verify_trace(&records, config.policy.retry_cap, &config.cost, summary.as_ref()) {
        Ok(report) => {
            println!(
                "ok: {} attempts, {} invocations, {} completed, {} terminated, {} exempt, total cost {} nanos",
                report.attempts, report.invocations, report.completed, report.terminated, report.exempt, report.total_cost_nanos
            );
            Ok(())
        }
        Err(ReportError::Verify(problems)) => {
            for p in &problems {
                eprintln!("violation: {p}");
            }
            Err(Failure::Invariant(anyhow!("{} invariant violations", problems.len())))
        }
        Err(e) => Err(Failure::Invariant(e.into())),
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            mut config,
            policy_disabled,
            output_dir,
        } => {
            let policy_disabled = take_flag(&mut config.overrides, "--policy-disabled") || policy_disabled;
            let output_dir = take_value(&mut config.overrides, "--output-dir")?.map(PathBuf::from).or(output_dir);
            let config = load(&mut config)?;
            let out = output_dir.unwrap_or_else(|| config.output_dir.clone());
            run(&config, &out, policy_disabled)
        }
        Command::Pretest { mut config, scores } => {
            let scores = take_flag(&mut config.overrides, "--scores") || scores;
            pretest(&load(&mut config)?, scores)
        }
        Command::PrintDefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml());
            Ok(())
        }
        Command::Verify {
            trace,
            summary,
            mut config,
        } => {
            let summary = take_value(&mut config.overrides, "--summary")?.map(PathBuf::from).or(summary);
            let config = load(&mut config)?;
            verify(&trace, summary.as_deref(), &config)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let code = failure.exit_code();
            let (kind, err) = match failure {
                Failure::Config(e) => ("config error", e),
                Failure::Invariant(e) => ("invariant violation", e),
                Failure::Other(e) => ("error", e),
            };
            eprintln!("{kind}: {err:#}");
            ExitCode::from(code)
        }
    }
}
