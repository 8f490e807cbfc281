//! Discrete-event lane executor.
//!
//! Runs any number of repair tasks on a virtual clock. Each task has a lane
//! plan; lanes advance concurrently and each lane runs its agents one after
//! another. The first plausible patch to complete wins and every other
//! in-flight attempt of that task is cancelled. Provider quotas are shared
//! across all tasks in the engine.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::plan::LanePlan;
use super::quota::{Admission, ProviderQuota, QuotaBook};
use crate::error::{Error, Result};
use crate::event::{AttemptKind, EventPayload};
use crate::model::{AgentProfile, CrashId, CrashReport, Millis, OutcomeClass, OutcomeKind, Patch, PatchId, TaskId};

pub struct AttemptRequest<'a> {
    pub task_id: TaskId,
    pub crash: &'a CrashReport,
    pub agent: &'a AgentProfile,
    pub lane: usize,
    /// 1-based attempt number for this agent within the task.
    pub attempt: u32,
    pub now: Millis,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DrawOutcome {
    /// A validated plausible patch.
    Plausible(Patch),
    RepairFailure(String),
    AgentError(String),
}

/// The full result of one attempt, decided when the attempt starts.
#[derive(Clone, Debug, PartialEq)]
pub struct AttemptDraw {
    pub outcome: DrawOutcome,
    pub latency: Millis,
    pub cost: f64,
}

/// Executes agent attempts. In simulation the runner draws outcomes; a real
/// runner would invoke the agent and the validator.
pub trait AgentRunner {
    /// Refuses a task before any agent runs, e.g. when the unpatched
    /// project cannot be built. The task then ends in `Error`.
    fn preflight(&mut self, _crash: &CrashReport) -> std::result::Result<(), String> {
        Ok(())
    }

    fn attempt(&mut self, req: &AttemptRequest<'_>) -> AttemptDraw;
}

impl<R: AgentRunner + ?Sized> AgentRunner for &mut R {
    fn preflight(&mut self, crash: &CrashReport) -> std::result::Result<(), String> {
        (**self).preflight(crash)
    }

    fn attempt(&mut self, req: &AttemptRequest<'_>) -> AttemptDraw {
        (**self).attempt(req)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub agent: String,
    pub attempt: u32,
    pub started_at: Millis,
    pub ended_at: Millis,
    pub kind: AttemptKind,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneRecord {
    pub agents: Vec<String>,
    /// Index of the agent the lane stopped at.
    pub cursor: usize,
    pub attempts: Vec<AttemptRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRun {
    pub task_id: TaskId,
    pub crash_id: CrashId,
    pub lanes: Vec<LaneRecord>,
    pub result: Option<PatchId>,
    /// Agent whose patch was selected.
    pub winner: Option<String>,
    pub outcome: OutcomeClass,
    pub started_at: Millis,
    pub ended_at: Millis,
    pub total_cost: f64,
    /// Stopped from outside, e.g. because the crash turned out to be a
    /// duplicate while the task ran.
    pub cancelled: bool,
}

impl TaskRun {
    pub fn attempts(&self) -> impl Iterator<Item = &AttemptRecord> {
        self.lanes.iter().flat_map(|l| l.attempts.iter())
    }

    pub fn latency(&self) -> Millis {
        self.ended_at - self.started_at
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutput {
    pub run: TaskRun,
    pub patch: Option<Patch>,
}

/// Success iff a patch was selected; Failure iff at least one agent reached
/// a repair verdict of its own (including running out of time); Error when
/// nothing ran or every attempt died with an agent error.
pub fn classify_outcome(run: &TaskRun) -> OutcomeClass {
    if let Some(p) = &run.result {
        return OutcomeClass::success(p.clone());
    }
    let mut failures = 0;
    let mut timeouts = 0;
    let mut errors = 0;
    for a in run.attempts() {
        match a.kind {
            AttemptKind::RepairFailure => failures += 1,
            AttemptKind::Timeout => timeouts += 1,
            AttemptKind::AgentError => errors += 1,
            AttemptKind::Plausible | AttemptKind::Cancelled => {}
        }
    }
    if failures + timeouts > 0 {
        OutcomeClass::failure(format!(
            "agents exhausted without a patch ({failures} failed, {timeouts} timed out, {errors} errored)"
        ))
    } else if errors > 0 {
        OutcomeClass::error(format!("all {errors} attempts ended in agent errors"))
    } else {
        OutcomeClass::error("no agent attempt could be started")
    }
}

#[derive(Clone, Debug)]
pub enum EngineOutput {
    Event { at: Millis, payload: EventPayload },
    Finished(TaskOutput),
}

#[derive(Clone, Debug)]
struct Running {
    attempt: u32,
    started: Millis,
    finish: Millis,
    kind: AttemptKind,
    cost: f64,
    patch: Option<Patch>,
    gen: u64,
    wake: WakeKey,
}

type WakeKey = (Millis, u8, u64, usize, u64);

#[derive(Clone, Debug)]
enum LaneState {
    Idle,
    Waiting,
    Running(Box<Running>),
    Exhausted,
}

#[derive(Clone, Debug)]
struct Cursor {
    agents: Vec<String>,
    idx: usize,
    attempt: u32,
    state: LaneState,
}

#[derive(Clone, Debug)]
struct ActiveTask {
    crash: CrashReport,
    lanes: Vec<Cursor>,
    run: TaskRun,
}

#[derive(Clone, Debug)]
enum Wake {
    AttemptDone { task: TaskId, lane: usize, gen: u64 },
    Retry { task: TaskId, lane: usize },
    Release { provider: String },
}

pub struct LaneEngine<R> {
    runner: R,
    agents: BTreeMap<String, AgentProfile>,
    quotas: QuotaBook,
    tick_ms: Millis,
    now: Millis,
    seq: u64,
    /// Keyed by (time, class, task, lane, seq) so that simultaneous
    /// completions resolve in lane order.
    wakes: BTreeMap<WakeKey, Wake>,
    tasks: BTreeMap<TaskId, ActiveTask>,
    waiting: VecDeque<(TaskId, usize)>,
    outputs: Vec<EngineOutput>,
}

/// Default cooperative-cancellation grace period.
pub const DEFAULT_TICK_MS: Millis = 100;

impl<R: AgentRunner> LaneEngine<R> {
    pub fn new(runner: R, agents: &[AgentProfile], quotas: &[ProviderQuota], tick_ms: Millis) -> Result<Self> {
        let mut by_name = BTreeMap::new();
        for a in agents {
            a.validate()?;
            if by_name.insert(a.agent_name.clone(), a.clone()).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate agent {}", a.agent_name)));
            }
        }
        Ok(Self {
            runner,
            agents: by_name,
            quotas: QuotaBook::new(quotas)?,
            tick_ms,
            now: 0,
            seq: 0,
            wakes: BTreeMap::new(),
            tasks: BTreeMap::new(),
            waiting: VecDeque::new(),
            outputs: Vec::new(),
        })
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn runner(&self) -> &R {
        &self.runner
    }

    pub fn runner_mut(&mut self) -> &mut R {
        &mut self.runner
    }

    pub fn into_runner(self) -> R {
        self.runner
    }

    pub fn quotas(&self) -> &QuotaBook {
        &self.quotas
    }

    pub fn active_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_active(&self, task: TaskId) -> bool {
        self.tasks.contains_key(&task)
    }

    pub fn next_wake(&self) -> Option<Millis> {
        self.wakes.keys().next().map(|k| k.0)
    }

    pub fn take_outputs(&mut self) -> Vec<EngineOutput> {
        std::mem::take(&mut self.outputs)
    }

    fn schedule(&mut self, at: Millis, wake: Wake) -> WakeKey {
        self.seq += 1;
        let key = match &wake {
            Wake::Release { .. } => (at, 0, 0, 0, self.seq),
            Wake::AttemptDone { task, lane, .. } => (at, 1, task.0, *lane, self.seq),
            Wake::Retry { task, lane } => (at, 2, task.0, *lane, self.seq),
        };
        self.wakes.insert(key, wake);
        key
    }

    fn advance_clock(&mut self, now: Millis) {
        debug_assert!(now >= self.now, "clock moved backwards");
        self.now = self.now.max(now);
    }

    /// Starts a task at `now`. Lane heads start immediately, subject to
    /// provider quotas.
    pub fn submit(&mut self, task_id: TaskId, crash: CrashReport, plan: &LanePlan, now: Millis) -> Result<()> {
        self.advance_clock(now);
        if self.tasks.contains_key(&task_id) {
            return Err(Error::InvalidInput(format!("task {task_id} already running")));
        }
        for name in plan.lanes.iter().flatten() {
            if !self.agents.contains_key(name) {
                return Err(Error::InvalidConfig(format!("plan names unknown agent {name}")));
            }
        }
        let run = TaskRun {
            task_id,
            crash_id: crash.crash_id.clone(),
            lanes: plan
                .lanes
                .iter()
                .map(|l| LaneRecord {
                    agents: l.clone(),
                    cursor: 0,
                    attempts: Vec::new(),
                })
                .collect(),
            result: None,
            winner: None,
            outcome: OutcomeClass::error("pending"),
            started_at: self.now,
            ended_at: self.now,
            total_cost: 0.0,
            cancelled: false,
        };
        let lanes = plan
            .lanes
            .iter()
            .map(|l| Cursor {
                agents: l.clone(),
                idx: 0,
                attempt: 1,
                state: LaneState::Idle,
            })
            .collect();
        let preflight = self.runner.preflight(&crash);
        self.tasks.insert(task_id, ActiveTask { crash, lanes, run });
        if let Err(reason) = preflight {
            self.close(task_id, Some(OutcomeClass::error(reason)));
            return Ok(());
        }
        for lane in 0..plan.lanes.len() {
            self.start_lane(task_id, lane);
        }
        self.maybe_close(task_id);
        Ok(())
    }

    /// Stops a task from outside. In-flight attempts are cut off after the
    /// grace tick and charged for the time they ran.
    pub fn cancel(&mut self, task_id: TaskId, now: Millis, reason: &str) {
        self.advance_clock(now);
        if !self.tasks.contains_key(&task_id) {
            return;
        }
        self.cut_off_lanes(task_id, None);
        let task = self.tasks.get_mut(&task_id).expect("checked above");
        task.run.cancelled = true;
        let outcome = OutcomeClass::failure(format!("cancelled: {reason}"));
        self.close(task_id, Some(outcome));
        self.drain_waiting();
    }

    /// Processes every wake-up at the earliest pending instant.
    pub fn step(&mut self) -> Option<Millis> {
        let t = self.next_wake()?;
        self.advance_clock(t);
        while let Some(entry) = self.wakes.first_entry() {
            if entry.key().0 != t {
                break;
            }
            let wake = entry.remove();
            self.handle(wake);
        }
        Some(t)
    }

    pub fn run_until_idle(&mut self) {
        while self.step().is_some() {}
    }

    fn handle(&mut self, wake: Wake) {
        match wake {
            Wake::AttemptDone { task, lane, gen } => self.attempt_done(task, lane, gen),
            Wake::Retry { task, lane } => {
                let waiting = self
                    .tasks
                    .get(&task)
                    .is_some_and(|t| matches!(t.lanes[lane].state, LaneState::Waiting));
                if waiting {
                    self.start_lane(task, lane);
                    self.maybe_close(task);
                }
            }
            Wake::Release { provider } => {
                self.quotas.release(&provider);
                self.drain_waiting();
            }
        }
    }

    fn start_lane(&mut self, task_id: TaskId, lane: usize) {
        let now = self.now;
        let Some(task) = self.tasks.get_mut(&task_id) else {
            return;
        };
        let cursor = &mut task.lanes[lane];
        if cursor.idx >= cursor.agents.len() {
            cursor.state = LaneState::Exhausted;
            task.run.lanes[lane].cursor = cursor.idx;
            return;
        }
        let agent = &self.agents[&cursor.agents[cursor.idx]];
        match self.quotas.try_acquire(&agent.provider_id, now, agent.est_tokens) {
            Admission::Saturated => {
                cursor.state = LaneState::Waiting;
                self.waiting.push_back((task_id, lane));
            }
            Admission::WaitUntil(at) => {
                cursor.state = LaneState::Waiting;
                self.schedule(at, Wake::Retry { task: task_id, lane });
            }
            Admission::Granted => {
                let attempt = cursor.attempt;
                let draw = self.runner.attempt(&AttemptRequest {
                    task_id,
                    crash: &task.crash,
                    agent,
                    lane,
                    attempt,
                    now,
                });
                let (kind, patch, duration, cost) = if draw.latency > agent.timeout_ms {
                    let share = agent.timeout_ms as f64 / draw.latency as f64;
                    (AttemptKind::Timeout, None, agent.timeout_ms, draw.cost * share)
                } else {
                    match draw.outcome {
                        DrawOutcome::Plausible(p) => (AttemptKind::Plausible, Some(p), draw.latency, draw.cost),
                        DrawOutcome::RepairFailure(_) => (AttemptKind::RepairFailure, None, draw.latency, draw.cost),
                        DrawOutcome::AgentError(_) => (AttemptKind::AgentError, None, draw.latency, draw.cost),
                    }
                };
                self.seq += 1;
                let gen = self.seq;
                let finish = now + duration;
                let wake = (finish, 1, task_id.0, lane, gen);
                self.wakes.insert(wake, Wake::AttemptDone { task: task_id, lane, gen });
                cursor.state = LaneState::Running(Box::new(Running {
                    attempt,
                    started: now,
                    finish,
                    kind,
                    cost,
                    patch,
                    gen,
                    wake,
                }));
                self.outputs.push(EngineOutput::Event {
                    at: now,
                    payload: EventPayload::AgentStarted {
                        task_id,
                        lane,
                        agent: agent.agent_name.clone(),
                        attempt,
                    },
                });
            }
        }
    }

    fn attempt_done(&mut self, task_id: TaskId, lane: usize, gen: u64) {
        let now = self.now;
        let Some(task) = self.tasks.get_mut(&task_id) else {
            return;
        };
        let cursor = &mut task.lanes[lane];
        let running = match &cursor.state {
            LaneState::Running(r) if r.gen == gen => r.clone(),
            _ => return,
        };
        let agent = self.agents[&cursor.agents[cursor.idx]].clone();
        self.quotas.release(&agent.provider_id);

        task.run.lanes[lane].attempts.push(AttemptRecord {
            agent: agent.agent_name.clone(),
            attempt: running.attempt,
            started_at: running.started,
            ended_at: now,
            kind: running.kind,
            cost: running.cost,
        });
        task.run.total_cost += running.cost;
        self.outputs.push(EngineOutput::Event {
            at: now,
            payload: EventPayload::AgentFinished {
                task_id,
                lane,
                agent: agent.agent_name.clone(),
                attempt: running.attempt,
                result: running.kind,
                cost: running.cost,
                latency: now - running.started,
            },
        });

        match running.kind {
            AttemptKind::Plausible => {
                let patch = running.patch.expect("plausible attempts carry a patch");
                cursor.state = LaneState::Exhausted;
                task.run.lanes[lane].cursor = cursor.idx;
                task.run.result = Some(patch.patch_id.clone());
                task.run.winner = Some(agent.agent_name.clone());
                self.cut_off_lanes(task_id, Some(lane));
                self.close_with_patch(task_id, patch);
            }
            AttemptKind::RepairFailure | AttemptKind::Timeout => {
                if running.attempt < agent.max_attempts {
                    cursor.attempt += 1;
                } else {
                    cursor.idx += 1;
                    cursor.attempt = 1;
                }
                cursor.state = LaneState::Idle;
                self.start_lane(task_id, lane);
                self.maybe_close(task_id);
            }
            AttemptKind::AgentError | AttemptKind::Cancelled => {
                cursor.idx += 1;
                cursor.attempt = 1;
                cursor.state = LaneState::Idle;
                self.start_lane(task_id, lane);
                self.maybe_close(task_id);
            }
        }
        self.drain_waiting();
    }

    /// Cancels every running or waiting lane of a task except `keep`.
    fn cut_off_lanes(&mut self, task_id: TaskId, keep: Option<usize>) {
        let now = self.now;
        let grace_end = now + self.tick_ms;
        let mut releases = Vec::new();
        let mut stale = Vec::new();
        let Some(task) = self.tasks.get_mut(&task_id) else {
            return;
        };
        for (lane, cursor) in task.lanes.iter_mut().enumerate() {
            if Some(lane) == keep {
                continue;
            }
            match std::mem::replace(&mut cursor.state, LaneState::Exhausted) {
                LaneState::Running(r) => {
                    stale.push(r.wake);
                    let stop = grace_end.min(r.finish);
                    let span = r.finish - r.started;
                    let consumed = if span == 0 {
                        r.cost
                    } else {
                        r.cost * ((stop - r.started) as f64 / span as f64)
                    };
                    let agent = &self.agents[&cursor.agents[cursor.idx]];
                    task.run.lanes[lane].attempts.push(AttemptRecord {
                        agent: agent.agent_name.clone(),
                        attempt: r.attempt,
                        started_at: r.started,
                        ended_at: stop,
                        kind: AttemptKind::Cancelled,
                        cost: consumed,
                    });
                    task.run.total_cost += consumed;
                    self.outputs.push(EngineOutput::Event {
                        at: now,
                        payload: EventPayload::AgentFinished {
                            task_id,
                            lane,
                            agent: agent.agent_name.clone(),
                            attempt: r.attempt,
                            result: AttemptKind::Cancelled,
                            cost: consumed,
                            latency: stop - r.started,
                        },
                    });
                    releases.push((stop, agent.provider_id.clone()));
                }
                LaneState::Waiting | LaneState::Idle | LaneState::Exhausted => {}
            }
            task.run.lanes[lane].cursor = cursor.idx;
        }
        self.waiting.retain(|(t, _)| *t != task_id);
        for key in stale {
            self.wakes.remove(&key);
        }
        for (at, provider) in releases {
            self.schedule(at, Wake::Release { provider });
        }
    }

    fn maybe_close(&mut self, task_id: TaskId) {
        let done = self.tasks.get(&task_id).is_some_and(|t| {
            t.lanes
                .iter()
                .all(|c| matches!(c.state, LaneState::Exhausted))
        });
        if done {
            self.close(task_id, None);
        }
    }

    fn close_with_patch(&mut self, task_id: TaskId, patch: Patch) {
        if let Some(mut task) = self.tasks.remove(&task_id) {
            task.run.ended_at = self.now;
            task.run.outcome = classify_outcome(&task.run);
            self.outputs.push(EngineOutput::Finished(TaskOutput {
                run: task.run,
                patch: Some(patch),
            }));
        }
    }

    fn close(&mut self, task_id: TaskId, outcome: Option<OutcomeClass>) {
        if let Some(mut task) = self.tasks.remove(&task_id) {
            task.run.ended_at = self.now;
            task.run.outcome = outcome.unwrap_or_else(|| classify_outcome(&task.run));
            debug_assert!(task.run.outcome.kind != OutcomeKind::Success || task.run.result.is_some());
            self.outputs.push(EngineOutput::Finished(TaskOutput {
                run: task.run,
                patch: None,
            }));
        }
        self.waiting.retain(|(t, _)| *t != task_id);
    }

    fn drain_waiting(&mut self) {
        let pending = std::mem::take(&mut self.waiting);
        let mut touched = Vec::new();
        for (task, lane) in pending {
            let still_waiting = self
                .tasks
                .get(&task)
                .is_some_and(|t| matches!(t.lanes[lane].state, LaneState::Waiting));
            if still_waiting {
                self.start_lane(task, lane);
                touched.push(task);
            }
        }
        for task in touched {
            self.maybe_close(task);
        }
    }
}

/// Runs a single repair task to completion on a fresh virtual clock.
pub fn run_task<R: AgentRunner>(
    crash: CrashReport,
    plan: &LanePlan,
    runner: R,
    agents: &[AgentProfile],
    quotas: &[ProviderQuota],
) -> Result<(TaskOutput, Vec<EngineOutput>)> {
    let mut engine = LaneEngine::new(runner, agents, quotas, DEFAULT_TICK_MS)?;
    let start = crash.arrival_time;
    engine.submit(TaskId(0), crash, plan, start)?;
    engine.run_until_idle();
    let mut outputs = engine.take_outputs();
    let idx = outputs
        .iter()
        .position(|o| matches!(o, EngineOutput::Finished(_)))
        .expect("a task always finishes once the engine is idle");
    let EngineOutput::Finished(out) = outputs.remove(idx) else {
        unreachable!()
    };
    Ok((out, outputs))
}
