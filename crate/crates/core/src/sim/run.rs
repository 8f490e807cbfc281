use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::runner::SimAgentRunner;
use super::scenario::Scenario;
use crate::dedup::{DispatchDecision, Violation};
use crate::error::Result;
use crate::event::{Event, MemorySink};
use crate::model::{Millis, OutcomeKind};
use crate::orchestrator::{EngineOutput, LaneEngine, LanePlan, Strategy, TaskRun};
use crate::service::{Coordinator, TaskResult};
use crate::validation::{ResolutionMatrix, ResolutionOracle, SimulatedBackend};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

const ABSORBED: &str = "crash resolved by another task's patch";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupCounts {
    pub povs_total: usize,
    /// Crashes covered by a live patch they did not originate, summed over
    /// live patches: sum of (|covered| - 1).
    pub povs_deduplicated: usize,
    pub patches_stored: usize,
    pub patches_superseded: usize,
    /// Crashes still queued at the end of the run.
    pub povs_unresolved: usize,
    pub duplicates_at_arrival: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub strategy: Strategy,
    /// Tasks that ran to their own conclusion.
    pub tasks: usize,
    /// Tasks stopped because another patch absorbed their crash. Not part of
    /// `tasks` and not counted in the outcome tallies.
    pub tasks_cancelled: usize,
    pub success: usize,
    pub failure: usize,
    pub error: usize,
    pub latencies_ms: Vec<Millis>,
    pub costs: Vec<f64>,
    pub median_latency_ms: f64,
    pub median_cost: f64,
    pub total_cost: f64,
    pub makespan_ms: Millis,
    /// Share of successful tasks won by the most preferred agent.
    pub top_agent_share: f64,
    pub wins_by_agent: BTreeMap<String, usize>,
    pub provider_peaks: BTreeMap<String, u32>,
    pub provider_caps: BTreeMap<String, u32>,
    pub dedup: DedupCounts,
    pub backend_invocations: u64,
    pub quiescence_violations: usize,
}

#[derive(Debug)]
pub struct SimRun {
    pub metrics: SimMetrics,
    pub events: Vec<Event>,
    /// Every task, cancelled ones included, in completion order.
    pub runs: Vec<TaskRun>,
    pub violations: Vec<Violation>,
    /// Resolution rows registered for every generated patch; enough to
    /// re-probe the final state offline.
    pub matrix: ResolutionMatrix,
}

/// Median with the midpoint convention for even lengths; 0 when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

struct Loop {
    engine: LaneEngine<SimAgentRunner>,
    coord: Coordinator<MemorySink>,
    oracle: Arc<ResolutionOracle>,
    plan: LanePlan,
    workers: usize,
    runs: Vec<TaskRun>,
}

impl Loop {
    fn drain(&mut self) -> Result<()> {
        loop {
            let outputs = self.engine.take_outputs();
            if outputs.is_empty() {
                return Ok(());
            }
            for out in outputs {
                match out {
                    EngineOutput::Event { at, payload } => {
                        self.coord.advance_clock(at);
                        self.coord.record(payload)?;
                    }
                    EngineOutput::Finished(done) => {
                        let run = done.run;
                        self.coord.advance_clock(run.ended_at);
                        let report = self.coord.close_task(
                            run.task_id,
                            TaskResult {
                                patch: done.patch,
                                outcome: run.outcome.clone(),
                                cancelled: run.cancelled,
                                total_cost: run.total_cost,
                                started_at: run.started_at,
                                ended_at: run.ended_at,
                            },
                            &*self.oracle,
                        )?;
                        let now = run.ended_at;
                        self.runs.push(run);
                        for t in report.to_cancel {
                            self.engine.cancel(t, now, ABSORBED);
                        }
                    }
                }
            }
        }
    }

    fn dispatch_ready(&mut self) -> Result<()> {
        while self.engine.active_tasks() < self.workers {
            let Some((task_id, crash)) = self.coord.dispatch_next()? else {
                break;
            };
            let now = self.coord.clock().max(self.engine.now());
            self.engine.submit(task_id, crash, &self.plan, now)?;
            self.drain()?;
        }
        Ok(())
    }
}

/// Runs a scenario to completion on virtual time. Deterministic in the
/// scenario (seed included).
pub fn simulate(scenario: &Scenario) -> Result<SimRun> {
    let world = Arc::new(scenario.materialize()?);
    let backend = Arc::new(SimulatedBackend::new(ResolutionMatrix {
        projects_without_tests: scenario.projects_without_tests.clone(),
        ..ResolutionMatrix::default()
    }));
    let oracle = Arc::new(ResolutionOracle::simulated(backend.clone()));
    let plan = LanePlan::for_strategy(scenario.strategy, &scenario.agents, scenario.num_lanes)?;
    let runner = SimAgentRunner::new(
        scenario.seed,
        world.clone(),
        scenario.agent_overrides.clone(),
        scenario.broken_projects.clone(),
        backend.clone(),
        oracle.clone(),
    );
    let engine = LaneEngine::new(runner, &scenario.agents, &scenario.quotas, scenario.tick_ms)?;
    let mut lp = Loop {
        engine,
        coord: Coordinator::new(MemorySink::default()),
        oracle,
        plan,
        workers: scenario.workers.unwrap_or(usize::MAX),
        runs: Vec::new(),
    };

    let mut duplicates_at_arrival = 0;
    let mut next = 0;
    loop {
        let arrival = world.crashes.get(next).map(|c| c.arrival_time);
        let wake = lp.engine.next_wake();
        match arrival {
            Some(a) if wake.is_none_or(|w| a <= w) => {
                lp.coord.advance_clock(a);
                let crash = world.crashes[next].clone();
                next += 1;
                if let DispatchDecision::DuplicateOf(_) = lp.coord.receive_crash(crash, &*lp.oracle)? {
                    duplicates_at_arrival += 1;
                }
            }
            _ if wake.is_some() => {
                lp.engine.step();
                lp.drain()?;
            }
            _ => break,
        }
        lp.dispatch_ready()?;
    }

    let violations = lp.coord.quiescence_check(&*lp.oracle);
    let metrics = collect(scenario, &lp, duplicates_at_arrival, violations.len());
    Ok(SimRun {
        metrics,
        events: lp.coord.into_sink().events,
        runs: lp.runs,
        violations,
        matrix: backend.matrix(),
    })
}

fn collect(scenario: &Scenario, lp: &Loop, duplicates_at_arrival: usize, violations: usize) -> SimMetrics {
    let finished: Vec<&TaskRun> = lp.runs.iter().filter(|r| !r.cancelled).collect();
    let count = |k: OutcomeKind| finished.iter().filter(|r| r.outcome.kind == k).count();
    let latencies_ms: Vec<Millis> = finished.iter().map(|r| r.latency()).collect();
    let costs: Vec<f64> = finished.iter().map(|r| r.total_cost).collect();
    let lat_f: Vec<f64> = latencies_ms.iter().map(|&l| l as f64).collect();

    let mut wins_by_agent = BTreeMap::new();
    for r in &finished {
        if let Some(w) = &r.winner {
            *wins_by_agent.entry(w.clone()).or_insert(0) += 1;
        }
    }
    let success = count(OutcomeKind::Success);
    let top = scenario.agents.iter().min_by_key(|a| a.preference_rank);
    let top_wins = top
        .and_then(|a| wins_by_agent.get(&a.agent_name))
        .copied()
        .unwrap_or(0);

    let dedup_state = lp.coord.dedup();
    let store = dedup_state.store();
    let quotas = lp.engine.quotas();
    let provider_peaks = quotas.peaks();
    let provider_caps = provider_peaks
        .keys()
        .filter_map(|p| quotas.cap(p).map(|c| (p.clone(), c)))
        .collect();

    SimMetrics {
        schema_version: METRICS_SCHEMA_VERSION,
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        strategy: scenario.strategy,
        tasks: finished.len(),
        tasks_cancelled: lp.runs.len() - finished.len(),
        success,
        failure: count(OutcomeKind::Failure),
        error: count(OutcomeKind::Error),
        median_latency_ms: median(&lat_f),
        median_cost: median(&costs),
        total_cost: lp.runs.iter().map(|r| r.total_cost).sum(),
        makespan_ms: lp.runs.iter().map(|r| r.ended_at).max().unwrap_or(0),
        latencies_ms,
        costs,
        top_agent_share: if success == 0 {
            0.0
        } else {
            top_wins as f64 / success as f64
        },
        wins_by_agent,
        provider_peaks,
        provider_caps,
        dedup: DedupCounts {
            povs_total: dedup_state.crashes().len(),
            povs_deduplicated: store
                .patches()
                .values()
                .map(|p| p.covered_povs.len().saturating_sub(1))
                .sum(),
            patches_stored: store.len(),
            patches_superseded: store.superseded().len(),
            povs_unresolved: dedup_state.queue().len(),
            duplicates_at_arrival,
        },
        backend_invocations: lp.oracle.validator().backend_invocations(),
        quiescence_violations: violations,
    }
}

/// Per-task CSV: one row per task in completion order.
pub fn tasks_csv(runs: &[TaskRun]) -> String {
    let mut out = String::from("task_id,crash_id,outcome,cancelled,winner,latency_ms,cost,attempts\n");
    for r in runs {
        let outcome = match r.outcome.kind {
            OutcomeKind::Success => "success",
            OutcomeKind::Failure => "failure",
            OutcomeKind::Error => "error",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.task_id.0,
            r.crash_id,
            outcome,
            r.cancelled,
            r.winner.as_deref().unwrap_or(""),
            r.latency(),
            r.total_cost,
            r.attempts().count(),
        ));
    }
    out
}
