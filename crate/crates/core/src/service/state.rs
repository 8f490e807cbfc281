use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dedup::DedupState;
use crate::error::{Error, Result};
use crate::event::{AttemptKind, Event, EventPayload};
use crate::model::{CrashId, Millis, OutcomeClass, TaskId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub lane: usize,
    pub agent: String,
    pub attempt: u32,
    pub started_at: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<AttemptKind>,
    #[serde(default)]
    pub cost: f64,
    #[serde(default)]
    pub latency: Millis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskClosure {
    pub outcome: OutcomeClass,
    pub cancelled: bool,
    pub total_cost: f64,
    pub started_at: Millis,
    pub ended_at: Millis,
}

/// A repair task as seen by the coordinator, rebuilt from the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub crash_id: CrashId,
    pub dispatched_at: Millis,
    pub attempts: Vec<AttemptLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed: Option<TaskClosure>,
}

impl TaskRecord {
    pub fn is_open(&self) -> bool {
        self.closed.is_none()
    }
}

/// Task bookkeeping half of the coordinator state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskBook {
    pub tasks: BTreeMap<TaskId, TaskRecord>,
    pub next_task_id: u64,
    /// Open task per crash.
    #[serde(skip)]
    open_by_crash: BTreeMap<CrashId, TaskId>,
}

impl TaskBook {
    pub fn open_task_for(&self, crash: &CrashId) -> Option<TaskId> {
        self.open_by_crash.get(crash).copied()
    }

    pub fn open_tasks(&self) -> impl Iterator<Item = &TaskRecord> {
        self.open_by_crash.values().map(|t| &self.tasks[t])
    }

    pub fn rebuild(&mut self) {
        self.open_by_crash = self
            .tasks
            .values()
            .filter(|t| t.is_open())
            .map(|t| (t.crash_id.clone(), t.task_id))
            .collect();
    }

    pub fn apply(&mut self, event: &Event) -> Result<()> {
        match &event.payload {
            EventPayload::TaskDispatched { task_id, crash_id } => {
                if self.tasks.contains_key(task_id) {
                    return Err(Error::InvalidEvent(format!("task {task_id} dispatched twice")));
                }
                self.tasks.insert(
                    *task_id,
                    TaskRecord {
                        task_id: *task_id,
                        crash_id: crash_id.clone(),
                        dispatched_at: event.wall_time,
                        attempts: Vec::new(),
                        closed: None,
                    },
                );
                self.open_by_crash.insert(crash_id.clone(), *task_id);
                self.next_task_id = self.next_task_id.max(task_id.0 + 1);
            }
            EventPayload::AgentStarted {
                task_id,
                lane,
                agent,
                attempt,
            } => {
                let task = self.open_mut(*task_id)?;
                task.attempts.push(AttemptLog {
                    lane: *lane,
                    agent: agent.clone(),
                    attempt: *attempt,
                    started_at: event.wall_time,
                    result: None,
                    cost: 0.0,
                    latency: 0,
                });
            }
            EventPayload::AgentFinished {
                task_id,
                lane,
                agent,
                attempt,
                result,
                cost,
                latency,
            } => {
                let task = self.open_mut(*task_id)?;
                let slot = task
                    .attempts
                    .iter_mut()
                    .rev()
                    .find(|a| a.lane == *lane && &a.agent == agent && a.attempt == *attempt && a.result.is_none())
                    .ok_or_else(|| {
                        Error::InvalidEvent(format!("task {task_id}: {agent} finished without starting"))
                    })?;
                slot.result = Some(*result);
                slot.cost = *cost;
                slot.latency = *latency;
            }
            EventPayload::TaskClosed {
                task_id,
                crash_id,
                outcome,
                cancelled,
                total_cost,
                started_at,
                ended_at,
            } => {
                let task = self.open_mut(*task_id)?;
                if &task.crash_id != crash_id {
                    return Err(Error::InvalidEvent(format!(
                        "task {task_id} closed for crash {crash_id}, dispatched for {}",
                        task.crash_id
                    )));
                }
                task.closed = Some(TaskClosure {
                    outcome: outcome.clone(),
                    cancelled: *cancelled,
                    total_cost: *total_cost,
                    started_at: *started_at,
                    ended_at: *ended_at,
                });
                self.open_by_crash.remove(crash_id);
            }
            _ => {}
        }
        Ok(())
    }

    fn open_mut(&mut self, task_id: TaskId) -> Result<&mut TaskRecord> {
        match self.tasks.get_mut(&task_id) {
            Some(t) if t.is_open() => Ok(t),
            Some(_) => Err(Error::InvalidEvent(format!("task {task_id} is already closed"))),
            None => Err(Error::InvalidEvent(format!("unknown task {task_id}"))),
        }
    }
}

/// Everything the coordinator knows; the fold of its event log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorState {
    pub dedup: DedupState,
    pub tasks: TaskBook,
    pub last_seq: u64,
    pub clock: Millis,
}

impl CoordinatorState {
    pub fn apply(&mut self, event: &Event) -> Result<()> {
        if event.seq <= self.last_seq {
            return Err(Error::NonMonotoneSeq {
                prev: self.last_seq,
                got: event.seq,
            });
        }
        self.dedup.apply(&event.payload)?;
        self.tasks.apply(event)?;
        self.last_seq = event.seq;
        self.clock = self.clock.max(event.wall_time);
        Ok(())
    }

    /// Restores indexes that are not serialised.
    pub fn rebuild_indexes(&mut self) {
        self.dedup.rebuild_indexes();
        self.tasks.rebuild();
    }

    pub fn replay<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<Self> {
        let mut state = Self::default();
        for e in events {
            state.apply(e)?;
        }
        Ok(state)
    }
}
