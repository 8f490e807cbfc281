//! Deterministic simulation on virtual time.
//!
//! A [`Scenario`] describes agents, quotas and a crash stream whose crashes
//! are grouped by hidden root cause. [`simulate`] feeds the stream through
//! the real coordinator and lane engine, with seeded agent draws and a
//! scripted validation backend standing in for agents and builds.

mod run;
mod runner;
mod scenario;
mod sweep;

pub use run::{median, simulate, tasks_csv, DedupCounts, SimMetrics, SimRun, METRICS_SCHEMA_VERSION};
pub use runner::{attempt_rng, draw, Draw, SimAgentRunner};
pub use scenario::{
    AgentOverride, CrashSpec, CrashStream, RootCause, Scenario, World, SCENARIO_SCHEMA_VERSION,
};
pub use sweep::{sweep, StrategySummary, Sweep, SweepRow};
