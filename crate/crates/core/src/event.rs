//! The event vocabulary. Every coordinator state change is one of these
//! records, and replaying them in order rebuilds the coordinator state.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{CrashId, CrashReport, Millis, OutcomeClass, Patch, PatchId, TaskId};

pub const EVENT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    CrashReceived,
    TaskDispatched,
    AgentStarted,
    AgentFinished,
    PatchValidated,
    PatchStored,
    PatchMerged,
    PatchSubmitted,
    CrashDeduplicated,
    TaskClosed,
}

/// How a single agent attempt ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptKind {
    Plausible,
    RepairFailure,
    Timeout,
    AgentError,
    Cancelled,
}

impl AttemptKind {
    /// True when the agent ran to a repair verdict of its own, as opposed to
    /// crashing or being cut off.
    pub fn completed(self) -> bool {
        matches!(
            self,
            AttemptKind::Plausible | AttemptKind::RepairFailure | AttemptKind::Timeout
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventPayload {
    CrashReceived {
        crash: CrashReport,
    },
    CrashDeduplicated {
        crash_id: CrashId,
        patch_id: PatchId,
    },
    TaskDispatched {
        task_id: TaskId,
        crash_id: CrashId,
    },
    AgentStarted {
        task_id: TaskId,
        lane: usize,
        agent: String,
        attempt: u32,
    },
    AgentFinished {
        task_id: TaskId,
        lane: usize,
        agent: String,
        attempt: u32,
        result: AttemptKind,
        cost: f64,
        latency: Millis,
    },
    PatchValidated {
        patch: Patch,
    },
    PatchMerged {
        superseded: PatchId,
        into: PatchId,
    },
    PatchStored {
        patch_id: PatchId,
        covered_povs: BTreeSet<CrashId>,
    },
    PatchSubmitted {
        patch_id: PatchId,
    },
    TaskClosed {
        task_id: TaskId,
        crash_id: CrashId,
        outcome: OutcomeClass,
        /// Closed because the crash was deduplicated while the task ran.
        #[serde(default)]
        cancelled: bool,
        total_cost: f64,
        started_at: Millis,
        ended_at: Millis,
    },
}

impl EventPayload {
    pub fn kind(&self) -> EventKind {
        match self {
            EventPayload::CrashReceived { .. } => EventKind::CrashReceived,
            EventPayload::CrashDeduplicated { .. } => EventKind::CrashDeduplicated,
            EventPayload::TaskDispatched { .. } => EventKind::TaskDispatched,
            EventPayload::AgentStarted { .. } => EventKind::AgentStarted,
            EventPayload::AgentFinished { .. } => EventKind::AgentFinished,
            EventPayload::PatchValidated { .. } => EventKind::PatchValidated,
            EventPayload::PatchMerged { .. } => EventKind::PatchMerged,
            EventPayload::PatchStored { .. } => EventKind::PatchStored,
            EventPayload::PatchSubmitted { .. } => EventKind::PatchSubmitted,
            EventPayload::TaskClosed { .. } => EventKind::TaskClosed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub wall_time: Millis,
    #[serde(flatten)]
    pub payload: EventPayload,
}

/// Destination for events produced by the coordinator. The sink sees each
/// event before the state applies it.
pub trait EventSink {
    fn record(&mut self, event: &Event) -> crate::Result<()>;

    /// Offered a full state snapshot every few thousand events. Sinks that
    /// do not persist snapshots ignore it.
    fn snapshot(&mut self, _state: &crate::service::StateView<'_>) -> crate::Result<()> {
        Ok(())
    }
}

/// Keeps every event in memory. Used by the simulator and by tests.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub events: Vec<Event>,
}

impl EventSink for MemorySink {
    fn record(&mut self, event: &Event) -> crate::Result<()> {
        self.events.push(event.clone());
        Ok(())
    }
}

/// Drops events. For callers that only want the final state.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl EventSink for NullSink {
    fn record(&mut self, _event: &Event) -> crate::Result<()> {
        Ok(())
    }
}

/// Checks log-level invariants: strictly increasing `seq`, and every
/// `PatchStored` preceded by a `PatchValidated` for the same patch.
pub fn check_event_order(events: &[Event]) -> Vec<String> {
    let mut problems = Vec::new();
    let mut validated = BTreeSet::new();
    let mut prev: Option<u64> = None;
    for e in events {
        if let Some(p) = prev {
            if e.seq <= p {
                problems.push(format!("seq {} follows {}", e.seq, p));
            }
        }
        prev = Some(e.seq);
        match &e.payload {
            EventPayload::PatchValidated { patch } => {
                validated.insert(patch.patch_id.clone());
            }
            EventPayload::PatchStored { patch_id, .. } if !validated.contains(patch_id) => {
                problems.push(format!("patch {patch_id} stored at seq {} before validation", e.seq));
            }
            _ => {}
        }
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{OutcomeClass, ScanMode};

    #[test]
    fn event_json_shape() {
        let crash = CrashReport::new("p", "h", b"x".to_vec(), "s", ScanMode::Delta, 5).unwrap();
        let e = Event {
            seq: 3,
            wall_time: 5,
            payload: EventPayload::CrashReceived { crash },
        };
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        assert_eq!(v["kind"], "CrashReceived");
        assert_eq!(v["seq"], 3);
        assert_eq!(v["payload"]["crash"]["mode"], "delta");
        assert_eq!(v["payload"]["crash"]["pov_blob"], "eA==");
        let back: Event = serde_json::from_value(v).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn order_checker_flags_store_without_validation() {
        let events = vec![
            Event {
                seq: 1,
                wall_time: 0,
                payload: EventPayload::PatchStored {
                    patch_id: PatchId::new("p1"),
                    covered_povs: BTreeSet::new(),
                },
            },
            Event {
                seq: 1,
                wall_time: 0,
                payload: EventPayload::TaskClosed {
                    task_id: TaskId(1),
                    crash_id: CrashId::new("c"),
                    outcome: OutcomeClass::failure("x"),
                    cancelled: false,
                    total_cost: 0.0,
                    started_at: 0,
                    ended_at: 0,
                },
            },
        ];
        let problems = check_event_order(&events);
        assert_eq!(problems.len(), 2);
    }
}
