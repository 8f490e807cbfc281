use serde::{Deserialize, Serialize};

use super::state::{CoordinatorState, TaskBook};
use crate::dedup::{DedupEngine, DedupState, DispatchDecision, PatchStoreDelta, QueueState, Violation};
use crate::error::{Error, Result};
use crate::event::{Event, EventPayload, EventSink};
use crate::model::{CrashId, CrashReport, Millis, OutcomeClass, OutcomeKind, Patch, PatchId, TaskId};
use crate::validation::Resolver;

/// Snapshot cadence for sinks that persist snapshots.
pub const SNAPSHOT_EVERY: u64 = 10_000;

/// Borrowed view of the coordinator state; serialises exactly like
/// [`CoordinatorState`].
#[derive(Serialize)]
pub struct StateView<'a> {
    pub dedup: &'a DedupState,
    pub tasks: &'a TaskBook,
    pub last_seq: u64,
    pub clock: Millis,
}

/// What a worker reports when a task ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<Patch>,
    pub outcome: OutcomeClass,
    #[serde(default)]
    pub cancelled: bool,
    pub total_cost: f64,
    pub started_at: Millis,
    pub ended_at: Millis,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CloseReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<PatchStoreDelta>,
    /// Open tasks whose crash the new patch absorbed; the caller should
    /// cancel them.
    pub to_cancel: Vec<TaskId>,
}

/// The single writer: deduplication decisions, dispatch and task
/// bookkeeping. Every mutation is recorded by the sink before it is applied.
pub struct Coordinator<S> {
    engine: DedupEngine,
    tasks: TaskBook,
    last_seq: u64,
    clock: Millis,
    sink: S,
    last_snapshot: u64,
}

fn emit_into<'a, S: EventSink>(
    sink: &'a mut S,
    tasks: &'a mut TaskBook,
    last_seq: &'a mut u64,
    clock: Millis,
) -> impl FnMut(&EventPayload) -> Result<()> + 'a {
    move |payload| {
        let event = Event {
            seq: *last_seq + 1,
            wall_time: clock,
            payload: payload.clone(),
        };
        sink.record(&event)?;
        *last_seq = event.seq;
        tasks.apply(&event)
    }
}

impl<S: EventSink> Coordinator<S> {
    pub fn new(sink: S) -> Self {
        Self::resume(CoordinatorState::default(), sink)
    }

    /// Continues from a replayed state.
    pub fn resume(state: CoordinatorState, sink: S) -> Self {
        Self {
            engine: DedupEngine::from_state(state.dedup),
            tasks: state.tasks,
            last_seq: state.last_seq,
            clock: state.clock,
            sink,
            last_snapshot: state.last_seq,
        }
    }

    pub fn dedup(&self) -> &DedupState {
        &self.engine.state
    }

    pub fn tasks(&self) -> &TaskBook {
        &self.tasks
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn clock(&self) -> Millis {
        self.clock
    }

    pub fn sink(&self) -> &S {
        &self.sink
    }

    pub fn sink_mut(&mut self) -> &mut S {
        &mut self.sink
    }

    pub fn into_sink(self) -> S {
        self.sink
    }

    pub fn warnings(&self) -> &[String] {
        &self.engine.warnings
    }

    pub fn view(&self) -> StateView<'_> {
        StateView {
            dedup: &self.engine.state,
            tasks: &self.tasks,
            last_seq: self.last_seq,
            clock: self.clock,
        }
    }

    pub fn to_state(&self) -> CoordinatorState {
        CoordinatorState {
            dedup: self.engine.state.clone(),
            tasks: self.tasks.clone(),
            last_seq: self.last_seq,
            clock: self.clock,
        }
    }

    /// Moves the coordinator clock forward. Earlier instants are ignored.
    pub fn advance_clock(&mut self, now: Millis) {
        self.clock = self.clock.max(now);
    }

    fn emit_own(&mut self, payload: EventPayload) -> Result<()> {
        emit_into(&mut self.sink, &mut self.tasks, &mut self.last_seq, self.clock)(&payload)?;
        self.engine.state.apply(&payload)
    }

    fn maybe_snapshot(&mut self) -> Result<()> {
        if self.last_seq / SNAPSHOT_EVERY > self.last_snapshot / SNAPSHOT_EVERY {
            let view = StateView {
                dedup: &self.engine.state,
                tasks: &self.tasks,
                last_seq: self.last_seq,
                clock: self.clock,
            };
            self.sink.snapshot(&view)?;
            self.last_snapshot = self.last_seq;
        }
        Ok(())
    }

    /// Ingests a crash report: identity check, then crash-side dedup.
    pub fn receive_crash<R: Resolver + ?Sized>(
        &mut self,
        crash: CrashReport,
        resolver: &R,
    ) -> Result<DispatchDecision> {
        crash.verify_identity()?;
        if crash.pov_blob.is_empty() {
            return Err(Error::InvalidInput("pov_blob must not be empty".into()));
        }
        let decision = {
            let mut emit = emit_into(&mut self.sink, &mut self.tasks, &mut self.last_seq, self.clock);
            self.engine.on_crash_received(crash, resolver, &mut emit)?
        };
        self.maybe_snapshot()?;
        Ok(decision)
    }

    /// Opens a repair task for a live crash that has none.
    pub fn dispatch(&mut self, crash_id: &CrashId) -> Result<TaskId> {
        let entry = self
            .engine
            .state
            .queue()
            .get(crash_id)
            .ok_or_else(|| Error::InvalidInput(format!("crash {crash_id} is not queued")))?;
        if let QueueState::Dispatched(t) = entry.state {
            return Err(Error::InvalidInput(format!("crash {crash_id} already has task {t}")));
        }
        let task_id = TaskId(self.tasks.next_task_id);
        self.emit_own(EventPayload::TaskDispatched {
            task_id,
            crash_id: crash_id.clone(),
        })?;
        self.maybe_snapshot()?;
        Ok(task_id)
    }

    /// Dispatches the oldest pending crash, if any.
    pub fn dispatch_next(&mut self) -> Result<Option<(TaskId, CrashReport)>> {
        let Some(crash_id) = self.engine.state.queue().next_pending().cloned() else {
            return Ok(None);
        };
        let task_id = self.dispatch(&crash_id)?;
        let crash = self.engine.state.crashes()[&crash_id].clone();
        Ok(Some((task_id, crash)))
    }

    /// Records a worker progress event (agent start/finish).
    pub fn record(&mut self, payload: EventPayload) -> Result<()> {
        match &payload {
            EventPayload::AgentStarted { task_id, .. } | EventPayload::AgentFinished { task_id, .. } => {
                if !self.tasks.tasks.get(task_id).is_some_and(|t| t.is_open()) {
                    return Err(Error::InvalidInput(format!("task {task_id} is not open")));
                }
            }
            other => {
                return Err(Error::InvalidInput(format!(
                    "{:?} events are produced by the coordinator itself",
                    other.kind()
                )))
            }
        }
        self.emit_own(payload)?;
        self.maybe_snapshot()
    }

    /// Closes a task. A plausible patch goes through patch-side dedup before
    /// the task is closed.
    pub fn close_task<R: Resolver + ?Sized>(
        &mut self,
        task_id: TaskId,
        result: TaskResult,
        resolver: &R,
    ) -> Result<CloseReport> {
        let record = self
            .tasks
            .tasks
            .get(&task_id)
            .filter(|t| t.is_open())
            .ok_or_else(|| Error::InvalidInput(format!("task {task_id} is not open")))?;
        let crash_id = record.crash_id.clone();
        if result.ended_at < result.started_at {
            return Err(Error::InvalidInput("task ended before it started".into()));
        }
        let mut report = CloseReport::default();
        let outcome = match result.patch {
            Some(patch) => {
                if patch.origin_crash != crash_id {
                    return Err(Error::InvalidInput(format!(
                        "patch {} was generated for {}, not for task crash {crash_id}",
                        patch.patch_id, patch.origin_crash
                    )));
                }
                let patch_id = patch.patch_id.clone();
                let delta = {
                    let mut emit = emit_into(&mut self.sink, &mut self.tasks, &mut self.last_seq, self.clock);
                    self.engine.on_patch_generated(patch, resolver, &mut emit)?
                };
                report.to_cancel = delta
                    .dequeued
                    .iter()
                    .filter_map(|c| self.tasks.open_task_for(c))
                    .filter(|t| *t != task_id)
                    .collect();
                report.delta = Some(delta);
                OutcomeClass::success(patch_id)
            }
            None if result.outcome.kind == OutcomeKind::Success => {
                return Err(Error::InvalidInput("a successful task must carry its patch".into()));
            }
            None => result.outcome,
        };
        self.emit_own(EventPayload::TaskClosed {
            task_id,
            crash_id,
            outcome,
            cancelled: result.cancelled,
            total_cost: result.total_cost,
            started_at: result.started_at,
            ended_at: result.ended_at,
        })?;
        self.maybe_snapshot()?;
        Ok(report)
    }

    pub fn submit(&mut self, patch_id: &PatchId) -> Result<()> {
        {
            let mut emit = emit_into(&mut self.sink, &mut self.tasks, &mut self.last_seq, self.clock);
            self.engine.submit(patch_id, &mut emit)?;
        }
        self.maybe_snapshot()
    }

    pub fn quiescence_check<R: Resolver + ?Sized>(&self, resolver: &R) -> Vec<Violation> {
        self.engine.quiescence_check(resolver)
    }
}
