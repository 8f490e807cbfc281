//! Repair-task orchestration: lane planning, provider quotas and the
//! first-plausible-wins lane executor.

mod engine;
mod plan;
mod quota;

pub use engine::{
    classify_outcome, run_task, AgentRunner, AttemptDraw, AttemptRecord, AttemptRequest, DrawOutcome,
    EngineOutput, LaneEngine, LaneRecord, TaskOutput, TaskRun, DEFAULT_TICK_MS,
};
pub use plan::{plan_lanes, Lane, LanePlan, Strategy};
pub use quota::{Admission, ProviderQuota, QuotaBook, TokenBucket};
