//! Discrete-event simulator of a Function-as-a-Service platform whose worker
//! nodes differ in speed, together with a cold-start instance selection
//! policy: new instances benchmark themselves while the request downloads
//! its input, and slow instances re-queue the request and crash.
//!
//! The crate is organised bottom-up:
//!
//! - [`sim_core`]: event queue, virtual clock, seeded random streams
//! - [`platform`]: nodes, instances, scheduler
//! - [`policy`]: benchmark judging, retry cap, threshold calibration,
//!   streaming estimators
//! - [`cost`]: billing equation
//! - [`workload`]: closed-loop virtual users and the function body
//! - [`simulation`]: one run on the event loop
//! - [`reporting`]: summaries, paired comparisons, CSV/JSON output
//! - [`config`] and [`experiment`]: experiment files and the paired driver

pub mod config;
pub mod cost;
pub mod error;
pub mod experiment;
pub mod platform;
pub mod policy;
pub mod reporting;
pub mod sim_core;
pub mod simulation;
pub mod workload;

pub use config::{validate_config, ExperimentConfig};
pub use cost::{AttemptRecord, Classification, CostParams, CostReport, Outcome};
pub use error::{ConfigError, ReportError, SimError, StatsError};
pub use experiment::{run_experiment, run_seed, ExperimentError, SeedResult};
pub use platform::{Distribution, PlatformConfig};
pub use policy::{ElysiumThreshold, PolicyConfig, PolicyMode, ThresholdMode};
pub use reporting::{ComparisonReport, RunSummary};
pub use simulation::{simulate, RunOutput, RunSpec};
pub use workload::{FunctionProfile, WorkloadConfig};
