//! Patch-based two-phase deduplication.
//!
//! Crash side: a new crash is probed against every live stored patch of its
//! project and dropped as a duplicate if one of them stops it. When a new
//! patch lands, every live crash still waiting for a repair is probed against
//! it and absorbed on success.
//!
//! Patch side: a new patch that stops *every* PoV covered by an older stored
//! patch supersedes it and takes over its coverage. Partial overlap leaves
//! both patches in place and the shared crashes with the older one.
//!
//! Any probe that is not a clean `Resolved` counts as "not resolved". A
//! crash is never dropped on uncertain evidence.
//!
//! All mutation goes through [`DedupState::apply`], so replaying the emitted
//! events reproduces the state exactly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::EventPayload;
use crate::model::{CrashId, CrashReport, Millis, OutcomeKind, Patch, PatchId, PatchStatus, TaskId};
use crate::validation::{Resolution, Resolver};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "task_id", rename_all = "snake_case")]
pub enum QueueState {
    Pending,
    Dispatched(TaskId),
    /// A repair task ran and produced nothing; the crash stays live.
    Parked,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub crash_id: CrashId,
    pub arrival_time: Millis,
    pub state: QueueState,
}

/// Live, non-duplicate crashes awaiting a repair, FIFO by arrival time with
/// ties broken by crash id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchQueue {
    entries: Vec<QueueEntry>,
}

impl DispatchQueue {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[QueueEntry] {
        &self.entries
    }

    pub fn crash_ids(&self) -> impl Iterator<Item = &CrashId> {
        self.entries.iter().map(|e| &e.crash_id)
    }

    pub fn contains(&self, id: &CrashId) -> bool {
        self.position(id).is_some()
    }

    pub fn get(&self, id: &CrashId) -> Option<&QueueEntry> {
        self.position(id).map(|i| &self.entries[i])
    }

    fn position(&self, id: &CrashId) -> Option<usize> {
        self.entries.iter().position(|e| &e.crash_id == id)
    }

    /// Inserts in arrival order; returns false if the crash is already queued.
    fn insert(&mut self, crash_id: CrashId, arrival_time: Millis) -> bool {
        if self.contains(&crash_id) {
            return false;
        }
        let at = self
            .entries
            .partition_point(|e| (e.arrival_time, &e.crash_id) <= (arrival_time, &crash_id));
        self.entries.insert(
            at,
            QueueEntry {
                crash_id,
                arrival_time,
                state: QueueState::Pending,
            },
        );
        true
    }

    fn remove(&mut self, id: &CrashId) -> Option<QueueEntry> {
        self.position(id).map(|i| self.entries.remove(i))
    }

    fn set_state(&mut self, id: &CrashId, state: QueueState) -> bool {
        match self.position(id) {
            Some(i) => {
                self.entries[i].state = state;
                true
            }
            None => false,
        }
    }

    /// Oldest crash not yet handed to a worker.
    pub fn next_pending(&self) -> Option<&CrashId> {
        self.entries
            .iter()
            .find(|e| e.state == QueueState::Pending)
            .map(|e| &e.crash_id)
    }
}

/// Stored and submitted patches plus the crash → patch coverage index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchStore {
    patches: BTreeMap<PatchId, Patch>,
    /// Per project, live patches in probe order (creation time, then store
    /// order).
    #[serde(skip)]
    order: BTreeMap<String, BTreeSet<(Millis, u64, PatchId)>>,
    #[serde(skip)]
    coverage_index: BTreeMap<CrashId, PatchId>,
    /// Store sequence number per live patch; part of the probe-order key.
    store_seq: BTreeMap<PatchId, (String, u64)>,
    next_store_seq: u64,
    superseded: BTreeMap<PatchId, Patch>,
}

impl PatchStore {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn get(&self, id: &PatchId) -> Option<&Patch> {
        self.patches.get(id)
    }

    /// Live (stored or submitted) patches keyed by id.
    pub fn patches(&self) -> &BTreeMap<PatchId, Patch> {
        &self.patches
    }

    pub fn superseded(&self) -> &BTreeMap<PatchId, Patch> {
        &self.superseded
    }

    pub fn covering(&self, crash: &CrashId) -> Option<&PatchId> {
        self.coverage_index.get(crash)
    }

    pub fn coverage_index(&self) -> &BTreeMap<CrashId, PatchId> {
        &self.coverage_index
    }

    /// Live patches of one project in probe order.
    pub fn probe_order(&self, project: &str) -> Vec<PatchId> {
        self.order
            .get(project)
            .map(|s| s.iter().map(|(_, _, id)| id.clone()).collect())
            .unwrap_or_default()
    }

    /// Total number of crashes covered by live patches.
    pub fn covered_count(&self) -> usize {
        self.patches.values().map(|p| p.covered_povs.len()).sum()
    }

    /// Final grouping: live patch → covered crash set.
    pub fn partition(&self) -> BTreeMap<PatchId, BTreeSet<CrashId>> {
        self.patches
            .iter()
            .map(|(id, p)| (id.clone(), p.covered_povs.clone()))
            .collect()
    }

    fn insert(&mut self, project: &str, patch: Patch) {
        let seq = self.next_store_seq;
        self.next_store_seq += 1;
        for c in &patch.covered_povs {
            self.coverage_index.insert(c.clone(), patch.patch_id.clone());
        }
        self.order.entry(project.to_owned()).or_default().insert((
            patch.created_at,
            seq,
            patch.patch_id.clone(),
        ));
        self.store_seq
            .insert(patch.patch_id.clone(), (project.to_owned(), seq));
        self.patches.insert(patch.patch_id.clone(), patch);
    }

    fn take(&mut self, id: &PatchId) -> Option<Patch> {
        let patch = self.patches.remove(id)?;
        if let Some((project, seq)) = self.store_seq.remove(id) {
            if let Some(set) = self.order.get_mut(&project) {
                set.remove(&(patch.created_at, seq, id.clone()));
            }
        }
        for c in &patch.covered_povs {
            if self.coverage_index.get(c) == Some(id) {
                self.coverage_index.remove(c);
            }
        }
        Some(patch)
    }

    fn add_coverage(&mut self, id: &PatchId, crash: CrashId) -> bool {
        match self.patches.get_mut(id) {
            Some(p) => {
                p.covered_povs.insert(crash.clone());
                self.coverage_index.insert(crash, id.clone());
                true
            }
            None => false,
        }
    }

    /// Rebuilds the derived indexes after deserialisation.
    fn rebuild(&mut self) {
        self.order.clear();
        self.coverage_index.clear();
        for (id, p) in &self.patches {
            if let Some((project, seq)) = self.store_seq.get(id) {
                self.order
                    .entry(project.clone())
                    .or_default()
                    .insert((p.created_at, *seq, id.clone()));
            }
            for c in &p.covered_povs {
                self.coverage_index.insert(c.clone(), id.clone());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "patch_id", rename_all = "snake_case")]
pub enum DispatchDecision {
    Enqueue,
    DuplicateOf(PatchId),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchStoreDelta {
    /// Queued crashes absorbed by the new patch (its own origin excluded).
    pub dequeued: Vec<CrashId>,
    pub superseded: Vec<PatchId>,
    /// `None` when the patch brought nothing new: its origin is covered by
    /// another live patch and it neither absorbed nor superseded anything.
    pub stored: Option<PatchId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    QueuedButResolved { crash_id: CrashId, patch_id: PatchId },
    CoverageOverlap { crash_id: CrashId, patches: Vec<PatchId> },
    IndexMismatch { crash_id: CrashId, detail: String },
    QueuedAndCovered { crash_id: CrashId, patch_id: PatchId },
}

/// Event-sourced deduplication state: crash registry, dispatch queue and
/// patch store.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupState {
    crashes: BTreeMap<CrashId, CrashReport>,
    queue: DispatchQueue,
    store: PatchStore,
    /// Validated patches not yet stored.
    candidates: BTreeMap<PatchId, Patch>,
}

impl DedupState {
    pub fn queue(&self) -> &DispatchQueue {
        &self.queue
    }

    pub fn store(&self) -> &PatchStore {
        &self.store
    }

    pub fn crash(&self, id: &CrashId) -> Option<&CrashReport> {
        self.crashes.get(id)
    }

    pub fn crashes(&self) -> &BTreeMap<CrashId, CrashReport> {
        &self.crashes
    }

    pub fn candidate(&self, id: &PatchId) -> Option<&Patch> {
        self.candidates.get(id)
    }

    pub fn rebuild_indexes(&mut self) {
        self.store.rebuild();
    }

    fn project_of(&self, crash: &CrashId) -> Result<&str> {
        self.crashes
            .get(crash)
            .map(|c| c.project_id.as_str())
            .ok_or_else(|| Error::InvalidEvent(format!("unknown crash {crash}")))
    }

    /// The single mutator. Events that do not concern deduplication are
    /// ignored.
    pub fn apply(&mut self, payload: &EventPayload) -> Result<()> {
        match payload {
            EventPayload::CrashReceived { crash } => {
                if self.crashes.contains_key(&crash.crash_id) {
                    return Err(Error::InvalidEvent(format!(
                        "crash {} received twice",
                        crash.crash_id
                    )));
                }
                self.crashes.insert(crash.crash_id.clone(), crash.clone());
                self.queue.insert(crash.crash_id.clone(), crash.arrival_time);
            }
            EventPayload::CrashDeduplicated { crash_id, patch_id } => {
                if !self.crashes.contains_key(crash_id) {
                    return Err(Error::InvalidEvent(format!("unknown crash {crash_id}")));
                }
                self.queue.remove(crash_id);
                if let Some(c) = self.candidates.get_mut(patch_id) {
                    c.covered_povs.insert(crash_id.clone());
                } else if !self.store.add_coverage(patch_id, crash_id.clone()) {
                    return Err(Error::InvalidEvent(format!(
                        "crash {crash_id} deduplicated into unknown patch {patch_id}"
                    )));
                }
            }
            EventPayload::PatchValidated { patch } => {
                if patch.status != PatchStatus::Candidate {
                    return Err(Error::InvalidEvent(format!(
                        "patch {} validated in status {:?}",
                        patch.patch_id, patch.status
                    )));
                }
                self.candidates.insert(patch.patch_id.clone(), patch.clone());
            }
            EventPayload::PatchMerged { superseded, into } => {
                let mut old = self.store.take(superseded).ok_or_else(|| {
                    Error::InvalidEvent(format!("merge of unknown patch {superseded}"))
                })?;
                let target = self.candidates.get_mut(into).ok_or_else(|| {
                    Error::InvalidEvent(format!("merge into unknown candidate {into}"))
                })?;
                target.covered_povs.extend(old.covered_povs.iter().cloned());
                old.advance(PatchStatus::Superseded)?;
                self.store.superseded.insert(old.patch_id.clone(), old);
            }
            EventPayload::PatchStored {
                patch_id,
                covered_povs,
            } => {
                let mut patch = self.candidates.remove(patch_id).ok_or_else(|| {
                    Error::InvalidEvent(format!("store of unvalidated patch {patch_id}"))
                })?;
                let project = self.project_of(&patch.origin_crash)?.to_owned();
                for c in covered_povs {
                    if let Some(owner) = self.store.covering(c) {
                        return Err(Error::InvalidEvent(format!(
                            "crash {c} already covered by {owner}"
                        )));
                    }
                }
                patch.covered_povs = covered_povs.clone();
                patch.advance(PatchStatus::Stored)?;
                for c in covered_povs {
                    self.queue.remove(c);
                }
                self.store.insert(&project, patch);
            }
            EventPayload::PatchSubmitted { patch_id } => {
                let p = self.store.patches.get_mut(patch_id).ok_or_else(|| {
                    Error::InvalidEvent(format!("submit of unknown patch {patch_id}"))
                })?;
                p.advance(PatchStatus::Submitted)?;
            }
            EventPayload::TaskDispatched { task_id, crash_id } => {
                if !self.queue.set_state(crash_id, QueueState::Dispatched(*task_id)) {
                    return Err(Error::InvalidEvent(format!(
                        "dispatch of crash {crash_id} that is not queued"
                    )));
                }
            }
            EventPayload::TaskClosed {
                task_id,
                crash_id,
                outcome,
                ..
            } => {
                let still_ours = self
                    .queue
                    .get(crash_id)
                    .is_some_and(|e| e.state == QueueState::Dispatched(*task_id));
                if still_ours && outcome.kind != OutcomeKind::Success {
                    self.queue.set_state(crash_id, QueueState::Parked);
                }
                if let Some(p) = &outcome.patch_id {
                    // A candidate that was not stored is dropped with its task.
                    self.candidates.remove(p);
                }
            }
            EventPayload::AgentStarted { .. } | EventPayload::AgentFinished { .. } => {}
        }
        Ok(())
    }
}

/// Deduplication operations over a [`DedupState`].
///
/// Each operation emits events through `emit` and applies each one only
/// after `emit` accepted it, so a sink that persists events gets
/// write-ahead behaviour.
#[derive(Clone, Debug, Default)]
pub struct DedupEngine {
    pub state: DedupState,
    /// Probes that came back inconclusive, for diagnostics.
    pub warnings: Vec<String>,
}

pub type Emit<'a> = dyn FnMut(&EventPayload) -> Result<()> + 'a;

impl DedupEngine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_state(state: DedupState) -> Self {
        Self {
            state,
            warnings: Vec::new(),
        }
    }

    fn commit(&mut self, emit: &mut Emit<'_>, payload: EventPayload) -> Result<()> {
        emit(&payload)?;
        self.state.apply(&payload)
    }

    fn probe<R: Resolver + ?Sized>(&mut self, resolver: &R, patch: &Patch, crash: &CrashReport) -> bool {
        match resolver.resolve(patch, crash) {
            Resolution::Resolved => true,
            Resolution::StillCrashes => false,
            Resolution::Inconclusive => {
                let msg = format!(
                    "inconclusive probe of crash {} against patch {}; treated as unresolved",
                    crash.crash_id, patch.patch_id
                );
                tracing::warn!("{msg}");
                self.warnings.push(msg);
                false
            }
        }
    }

    /// Crash-side deduplication on arrival.
    pub fn on_crash_received<R: Resolver + ?Sized>(
        &mut self,
        crash: CrashReport,
        resolver: &R,
        emit: &mut Emit<'_>,
    ) -> Result<DispatchDecision> {
        if let Some(existing) = self.state.crashes.get(&crash.crash_id) {
            if existing != &crash {
                return Err(Error::InvalidInput(format!(
                    "crash id {} reused for different content",
                    crash.crash_id
                )));
            }
            return Ok(match self.state.store.covering(&crash.crash_id) {
                Some(p) => DispatchDecision::DuplicateOf(p.clone()),
                None => DispatchDecision::Enqueue,
            });
        }

        let mut hit = None;
        for pid in self.state.store.probe_order(&crash.project_id) {
            let patch = self.state.store.patches[&pid].clone();
            if self.probe(resolver, &patch, &crash) {
                hit = Some(pid);
                break;
            }
        }

        let crash_id = crash.crash_id.clone();
        self.commit(emit, EventPayload::CrashReceived { crash })?;
        match hit {
            Some(patch_id) => {
                self.commit(
                    emit,
                    EventPayload::CrashDeduplicated {
                        crash_id,
                        patch_id: patch_id.clone(),
                    },
                )?;
                Ok(DispatchDecision::DuplicateOf(patch_id))
            }
            None => Ok(DispatchDecision::Enqueue),
        }
    }

    /// Queue re-check, subsumption, then store.
    pub fn on_patch_generated<R: Resolver + ?Sized>(
        &mut self,
        patch: Patch,
        resolver: &R,
        emit: &mut Emit<'_>,
    ) -> Result<PatchStoreDelta> {
        if patch.status != PatchStatus::Candidate {
            return Err(Error::InvalidInput(format!(
                "patch {} must be a candidate",
                patch.patch_id
            )));
        }
        if self.state.store.get(&patch.patch_id).is_some()
            || self.state.store.superseded.contains_key(&patch.patch_id)
        {
            return Err(Error::InvalidInput(format!(
                "patch {} was already processed",
                patch.patch_id
            )));
        }
        let project = self
            .state
            .crashes
            .get(&patch.origin_crash)
            .ok_or_else(|| {
                Error::InvalidInput(format!("origin crash {} is unknown", patch.origin_crash))
            })?
            .project_id
            .clone();
        for c in &patch.covered_povs {
            if !self.state.crashes.contains_key(c) {
                return Err(Error::InvalidInput(format!("covered crash {c} is unknown")));
            }
        }

        let id = patch.patch_id.clone();
        self.commit(emit, EventPayload::PatchValidated { patch })?;
        let mut delta = PatchStoreDelta::default();

        // Phase 1: absorb live crashes the new patch resolves.
        let queued: Vec<CrashId> = self
            .state
            .queue
            .crash_ids()
            .filter(|c| !self.state.candidates[&id].covered_povs.contains(*c))
            .filter(|c| self.state.crashes[*c].project_id == project)
            .cloned()
            .collect();
        for crash_id in queued {
            let crash = self.state.crashes[&crash_id].clone();
            let candidate = self.state.candidates[&id].clone();
            if self.probe(resolver, &candidate, &crash) {
                self.commit(
                    emit,
                    EventPayload::CrashDeduplicated {
                        crash_id: crash_id.clone(),
                        patch_id: id.clone(),
                    },
                )?;
                delta.dequeued.push(crash_id);
            }
        }

        // Phase 2: supersede stored patches whose whole coverage it resolves.
        for old_id in self.state.store.probe_order(&project) {
            let old = self.state.store.patches[&old_id].clone();
            let candidate = self.state.candidates[&id].clone();
            let mut subsumes = !old.covered_povs.is_empty();
            for c in &old.covered_povs {
                let crash = self.state.crashes[c].clone();
                if !self.probe(resolver, &candidate, &crash) {
                    subsumes = false;
                    break;
                }
            }
            if subsumes {
                self.commit(
                    emit,
                    EventPayload::PatchMerged {
                        superseded: old_id.clone(),
                        into: id.clone(),
                    },
                )?;
                delta.superseded.push(old_id);
            }
        }

        // Crashes still owned by an older live patch stay with it.
        let covered: BTreeSet<CrashId> = self.state.candidates[&id]
            .covered_povs
            .iter()
            .filter(|c| self.state.store.covering(c).is_none())
            .cloned()
            .collect();
        if covered.is_empty() {
            return Ok(delta);
        }
        self.commit(
            emit,
            EventPayload::PatchStored {
                patch_id: id.clone(),
                covered_povs: covered,
            },
        )?;
        delta.stored = Some(id);
        Ok(delta)
    }

    /// Marks a stored patch as submitted for review.
    pub fn submit(&mut self, patch_id: &PatchId, emit: &mut Emit<'_>) -> Result<()> {
        match self.state.store.get(patch_id) {
            Some(p) if p.status == PatchStatus::Stored => self.commit(
                emit,
                EventPayload::PatchSubmitted {
                    patch_id: patch_id.clone(),
                },
            ),
            Some(_) => Ok(()),
            None => Err(Error::InvalidInput(format!("unknown patch {patch_id}"))),
        }
    }

    pub fn quiescence_check<R: Resolver + ?Sized>(&self, resolver: &R) -> Vec<Violation> {
        quiescence_check(&self.state, resolver)
    }
}

/// Lists every live crash that some stored patch resolves, plus every
/// coverage-disjointness or index inconsistency. Empty at quiescence.
pub fn quiescence_check<R: Resolver + ?Sized>(state: &DedupState, resolver: &R) -> Vec<Violation> {
    let mut out = Vec::new();
    let store = &state.store;

    for entry in state.queue.entries() {
        let Some(crash) = state.crashes.get(&entry.crash_id) else {
            out.push(Violation::IndexMismatch {
                crash_id: entry.crash_id.clone(),
                detail: "queued crash is not registered".into(),
            });
            continue;
        };
        if let Some(p) = store.covering(&entry.crash_id) {
            out.push(Violation::QueuedAndCovered {
                crash_id: entry.crash_id.clone(),
                patch_id: p.clone(),
            });
        }
        for pid in store.probe_order(&crash.project_id) {
            if resolver.resolve(&store.patches[&pid], crash) == Resolution::Resolved {
                out.push(Violation::QueuedButResolved {
                    crash_id: entry.crash_id.clone(),
                    patch_id: pid,
                });
            }
        }
    }

    let mut owners: BTreeMap<&CrashId, Vec<PatchId>> = BTreeMap::new();
    for (pid, p) in &store.patches {
        for c in &p.covered_povs {
            owners.entry(c).or_default().push(pid.clone());
        }
    }
    for (crash_id, patches) in &owners {
        if patches.len() > 1 {
            out.push(Violation::CoverageOverlap {
                crash_id: (*crash_id).clone(),
                patches: patches.clone(),
            });
        }
        match store.coverage_index.get(*crash_id) {
            Some(p) if patches.contains(p) => {}
            other => out.push(Violation::IndexMismatch {
                crash_id: (*crash_id).clone(),
                detail: format!("index points at {other:?}, covered by {patches:?}"),
            }),
        }
    }
    for (crash_id, pid) in &store.coverage_index {
        if !owners.contains_key(crash_id) {
            out.push(Violation::IndexMismatch {
                crash_id: crash_id.clone(),
                detail: format!("index points at {pid}, which does not cover it"),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScanMode;
    use std::cell::RefCell;

    fn crash(tag: &str, at: Millis) -> CrashReport {
        CrashReport::new("proj", "h", tag.as_bytes().to_vec(), "sig", ScanMode::Full, at).unwrap()
    }

    fn patch_for(origin: &CrashReport, tag: &str, at: Millis) -> Patch {
        Patch::candidate(
            format!("@@ -1 +1 @@\n-{tag}\n+ok\n"),
            "agent",
            origin.crash_id.clone(),
            at,
            0.0,
            0,
        )
        .unwrap()
    }

    /// Resolver backed by an explicit (patch, crash) table.
    struct Table(BTreeMap<(PatchId, CrashId), Resolution>);

    impl Resolver for Table {
        fn resolve(&self, p: &Patch, c: &CrashReport) -> Resolution {
            self.0
                .get(&(p.patch_id.clone(), c.crash_id.clone()))
                .copied()
                .unwrap_or(Resolution::StillCrashes)
        }
    }

    fn no_emit() -> impl FnMut(&EventPayload) -> Result<()> {
        |_| Ok(())
    }

    fn nothing(_: &Patch, _: &CrashReport) -> Resolution {
        Resolution::StillCrashes
    }

    #[test]
    fn first_crash_is_enqueued() {
        let mut e = DedupEngine::new();
        let d = e
            .on_crash_received(crash("c1", 0), &nothing, &mut no_emit())
            .unwrap();
        assert_eq!(d, DispatchDecision::Enqueue);
        assert_eq!(e.state.queue().len(), 1);
    }

    #[test]
    fn crash_resolved_by_stored_patch_is_duplicate() {
        let mut e = DedupEngine::new();
        let c1 = crash("c1", 0);
        let c2 = crash("c2", 5);
        e.on_crash_received(c1.clone(), &nothing, &mut no_emit()).unwrap();
        let p1 = patch_for(&c1, "a", 1);
        let resolves = |p: &Patch, _c: &CrashReport| {
            if p.origin_crash == c1.crash_id {
                Resolution::Resolved
            } else {
                Resolution::StillCrashes
            }
        };
        e.on_patch_generated(p1.clone(), &resolves, &mut no_emit()).unwrap();
        let d = e.on_crash_received(c2.clone(), &resolves, &mut no_emit()).unwrap();
        assert_eq!(d, DispatchDecision::DuplicateOf(p1.patch_id.clone()));
        let covered = &e.state.store().get(&p1.patch_id).unwrap().covered_povs;
        assert!(covered.contains(&c2.crash_id));
        assert!(e.state.queue().is_empty());
    }

    #[test]
    fn probe_order_skips_erroring_patch() {
        let mut e = DedupEngine::new();
        let c1 = crash("c1", 0);
        let c2 = crash("c2", 1);
        let c3 = crash("c3", 9);
        e.on_crash_received(c1.clone(), &nothing, &mut no_emit()).unwrap();
        e.on_crash_received(c2.clone(), &nothing, &mut no_emit()).unwrap();
        let p1 = patch_for(&c1, "a", 2);
        let p2 = patch_for(&c2, "b", 3);
        let own = |p: &Patch, c: &CrashReport| {
            if p.origin_crash == c.crash_id {
                Resolution::Resolved
            } else {
                Resolution::StillCrashes
            }
        };
        e.on_patch_generated(p1.clone(), &own, &mut no_emit()).unwrap();
        e.on_patch_generated(p2.clone(), &own, &mut no_emit()).unwrap();

        // Enumerate the probe sequence: p1 (older) first, then p2.
        let probes = RefCell::new(Vec::new());
        let table = Table(
            [
                ((p1.patch_id.clone(), c3.crash_id.clone()), Resolution::Inconclusive),
                ((p2.patch_id.clone(), c3.crash_id.clone()), Resolution::Resolved),
            ]
            .into(),
        );
        let scripted = |p: &Patch, c: &CrashReport| {
            probes.borrow_mut().push(p.patch_id.clone());
            table.resolve(p, c)
        };
        let d = e.on_crash_received(c3.clone(), &scripted, &mut no_emit()).unwrap();
        assert_eq!(d, DispatchDecision::DuplicateOf(p2.patch_id.clone()));
        assert_eq!(*probes.borrow(), [p1.patch_id.clone(), p2.patch_id.clone()]);
        assert_eq!(e.warnings.len(), 1);

        // If the older patch also resolves, it wins.
        let mut e2 = e.clone();
        let c4 = crash("c4", 10);
        let both = |_: &Patch, _: &CrashReport| Resolution::Resolved;
        let d = e2.on_crash_received(c4, &both, &mut no_emit()).unwrap();
        assert_eq!(d, DispatchDecision::DuplicateOf(p1.patch_id.clone()));
    }

    #[test]
    fn new_patch_absorbs_queued_crash() {
        let mut e = DedupEngine::new();
        let c1 = crash("c1", 0);
        let c2 = crash("c2", 1);
        e.on_crash_received(c1.clone(), &nothing, &mut no_emit()).unwrap();
        e.on_crash_received(c2.clone(), &nothing, &mut no_emit()).unwrap();
        let p = patch_for(&c1, "a", 5);
        let all = |_: &Patch, _: &CrashReport| Resolution::Resolved;
        let delta = e.on_patch_generated(p.clone(), &all, &mut no_emit()).unwrap();
        assert_eq!(delta.dequeued, std::slice::from_ref(&c2.crash_id));
        assert!(delta.superseded.is_empty());
        assert_eq!(delta.stored.as_ref(), Some(&p.patch_id));
        let covered = &e.state.store().get(&p.patch_id).unwrap().covered_povs;
        assert_eq!(*covered, BTreeSet::from([c1.crash_id.clone(), c2.crash_id.clone()]));
        assert!(e.state.queue().is_empty());
    }

    #[test]
    fn subsuming_patch_supersedes_old_one() {
        let mut e = DedupEngine::new();
        let c0 = crash("c0", 0);
        let c1 = crash("c1", 1);
        e.on_crash_received(c0.clone(), &nothing, &mut no_emit()).unwrap();
        e.on_crash_received(c1.clone(), &nothing, &mut no_emit()).unwrap();
        let own = |p: &Patch, c: &CrashReport| {
            if p.origin_crash == c.crash_id {
                Resolution::Resolved
            } else {
                Resolution::StillCrashes
            }
        };
        let p_old = patch_for(&c0, "narrow", 2);
        e.on_patch_generated(p_old.clone(), &own, &mut no_emit()).unwrap();

        let p_new = patch_for(&c1, "broad", 3);
        let broad = |p: &Patch, c: &CrashReport| {
            if p.patch_id == p_new.patch_id || p.origin_crash == c.crash_id {
                Resolution::Resolved
            } else {
                Resolution::StillCrashes
            }
        };
        let delta = e.on_patch_generated(p_new.clone(), &broad, &mut no_emit()).unwrap();
        assert_eq!(delta.superseded, std::slice::from_ref(&p_old.patch_id));
        assert_eq!(e.state.store().len(), 1);
        let covered = &e.state.store().get(&p_new.patch_id).unwrap().covered_povs;
        assert_eq!(*covered, BTreeSet::from([c0.crash_id.clone(), c1.crash_id.clone()]));
        assert_eq!(
            e.state.store().superseded()[&p_old.patch_id].status,
            PatchStatus::Superseded
        );
    }

    #[test]
    fn disjoint_patch_touches_nothing_else() {
        let mut e = DedupEngine::new();
        let c0 = crash("c0", 0);
        let c1 = crash("c1", 1);
        let c2 = crash("c2", 2);
        for c in [&c0, &c1, &c2] {
            e.on_crash_received(c.clone(), &nothing, &mut no_emit()).unwrap();
        }
        let own = |p: &Patch, c: &CrashReport| {
            if p.origin_crash == c.crash_id {
                Resolution::Resolved
            } else {
                Resolution::StillCrashes
            }
        };
        e.on_patch_generated(patch_for(&c0, "a", 3), &own, &mut no_emit()).unwrap();
        let before_queue = e.state.queue().clone();
        let p = patch_for(&c1, "b", 4);
        // Put the origin in flight so only c2 waits in the queue.
        e.state
            .apply(&EventPayload::TaskDispatched {
                task_id: TaskId(7),
                crash_id: c1.crash_id.clone(),
            })
            .unwrap();
        let delta = e.on_patch_generated(p.clone(), &own, &mut no_emit()).unwrap();
        assert!(delta.dequeued.is_empty());
        assert!(delta.superseded.is_empty());
        assert_eq!(delta.stored, Some(p.patch_id.clone()));
        assert_eq!(e.state.store().len(), 2);
        assert_eq!(e.state.queue().len(), before_queue.len() - 1);
        assert!(e.state.queue().contains(&c2.crash_id));
    }

    #[test]
    fn partial_overlap_keeps_both_patches() {
        let mut e = DedupEngine::new();
        let cs: Vec<_> = (0..3).map(|i| crash(&format!("c{i}"), i)).collect();
        for c in &cs {
            e.on_crash_received(c.clone(), &nothing, &mut no_emit()).unwrap();
        }
        // p_old covers c0 and c1.
        let p_old = patch_for(&cs[0], "old", 10);
        let first = |p: &Patch, c: &CrashReport| {
            if p.patch_id == p_old.patch_id && c.crash_id != cs[2].crash_id {
                Resolution::Resolved
            } else {
                Resolution::StillCrashes
            }
        };
        e.on_patch_generated(p_old.clone(), &first, &mut no_emit()).unwrap();
        assert_eq!(e.state.store().get(&p_old.patch_id).unwrap().covered_povs.len(), 2);

        // p_new resolves c1 and c2 but not c0.
        let p_new = patch_for(&cs[2], "new", 11);
        let second = |p: &Patch, c: &CrashReport| {
            if p.patch_id == p_new.patch_id && c.crash_id != cs[0].crash_id {
                Resolution::Resolved
            } else {
                Resolution::StillCrashes
            }
        };
        let delta = e.on_patch_generated(p_new.clone(), &second, &mut no_emit()).unwrap();
        assert!(delta.superseded.is_empty());
        assert_eq!(e.state.store().len(), 2);
        assert_eq!(e.state.store().covering(&cs[1].crash_id), Some(&p_old.patch_id));
        assert_eq!(
            e.state.store().get(&p_new.patch_id).unwrap().covered_povs,
            BTreeSet::from([cs[2].crash_id.clone()])
        );
        assert!(quiescence_check(&e.state, &nothing).is_empty());
    }

    #[test]
    fn redundant_patch_is_not_stored() {
        let mut e = DedupEngine::new();
        let c0 = crash("c0", 0);
        let c1 = crash("c1", 1);
        e.on_crash_received(c0.clone(), &nothing, &mut no_emit()).unwrap();
        e.on_crash_received(c1.clone(), &nothing, &mut no_emit()).unwrap();
        let all = |_: &Patch, _: &CrashReport| Resolution::Resolved;
        let p0 = patch_for(&c0, "a", 2);
        e.on_patch_generated(p0.clone(), &all, &mut no_emit()).unwrap();
        // A narrow late patch for c1, which p0 already covers.
        let late = patch_for(&c1, "late", 3);
        let own = |p: &Patch, c: &CrashReport| {
            if p.origin_crash == c.crash_id {
                Resolution::Resolved
            } else {
                Resolution::StillCrashes
            }
        };
        let delta = e.on_patch_generated(late, &own, &mut no_emit()).unwrap();
        assert_eq!(delta.stored, None);
        assert_eq!(e.state.store().len(), 1);
        assert!(quiescence_check(&e.state, &own).is_empty());
    }

    #[test]
    fn inconclusive_never_dequeues_or_supersedes() {
        let mut e = DedupEngine::new();
        let c0 = crash("c0", 0);
        let c1 = crash("c1", 1);
        let c2 = crash("c2", 2);
        for c in [&c0, &c1, &c2] {
            e.on_crash_received(c.clone(), &nothing, &mut no_emit()).unwrap();
        }
        let own = |p: &Patch, c: &CrashReport| {
            if p.origin_crash == c.crash_id {
                Resolution::Resolved
            } else {
                Resolution::StillCrashes
            }
        };
        let p0 = patch_for(&c0, "a", 3);
        e.on_patch_generated(p0, &own, &mut no_emit()).unwrap();
        let p1 = patch_for(&c1, "b", 4);
        let flaky = |p: &Patch, c: &CrashReport| {
            if p.origin_crash == c.crash_id {
                Resolution::Resolved
            } else {
                Resolution::Inconclusive
            }
        };
        let delta = e.on_patch_generated(p1, &flaky, &mut no_emit()).unwrap();
        assert!(delta.dequeued.is_empty());
        assert!(delta.superseded.is_empty());
        assert!(e.state.queue().contains(&c2.crash_id));
        assert_eq!(e.state.store().len(), 2);
        assert!(!e.warnings.is_empty());
    }

    #[test]
    fn quiescence_reports_injected_resolved_crash() {
        let mut e = DedupEngine::new();
        let c0 = crash("c0", 0);
        let c1 = crash("c1", 1);
        e.on_crash_received(c0.clone(), &nothing, &mut no_emit()).unwrap();
        let all = |_: &Patch, _: &CrashReport| Resolution::Resolved;
        let p0 = patch_for(&c0, "a", 2);
        e.on_patch_generated(p0.clone(), &all, &mut no_emit()).unwrap();
        assert!(e.quiescence_check(&all).is_empty());

        // Inject c1 straight into the queue, bypassing crash-side dedup.
        e.state.crashes.insert(c1.crash_id.clone(), c1.clone());
        e.state.queue.insert(c1.crash_id.clone(), 1);
        let v = e.quiescence_check(&all);
        assert_eq!(
            v,
            [Violation::QueuedButResolved {
                crash_id: c1.crash_id.clone(),
                patch_id: p0.patch_id.clone()
            }]
        );
    }

    #[test]
    fn quiescence_reports_shared_coverage() {
        let mut e = DedupEngine::new();
        let c0 = crash("c0", 0);
        let c1 = crash("c1", 1);
        e.on_crash_received(c0.clone(), &nothing, &mut no_emit()).unwrap();
        e.on_crash_received(c1.clone(), &nothing, &mut no_emit()).unwrap();
        let own = |p: &Patch, c: &CrashReport| {
            if p.origin_crash == c.crash_id {
                Resolution::Resolved
            } else {
                Resolution::StillCrashes
            }
        };
        let p0 = patch_for(&c0, "a", 2);
        let p1 = patch_for(&c1, "b", 3);
        e.on_patch_generated(p0.clone(), &own, &mut no_emit()).unwrap();
        e.on_patch_generated(p1.clone(), &own, &mut no_emit()).unwrap();
        assert!(e.quiescence_check(&own).is_empty());

        // Seed the mutation: p1 also claims c0.
        e.state
            .store
            .patches
            .get_mut(&p1.patch_id)
            .unwrap()
            .covered_povs
            .insert(c0.crash_id.clone());
        let v = e.quiescence_check(&own);
        assert_eq!(v.len(), 1);
        assert!(matches!(
            &v[0],
            Violation::CoverageOverlap { crash_id, patches }
                if crash_id == &c0.crash_id && patches.len() == 2
        ));
    }

    #[test]
    fn queue_orders_by_arrival_then_id() {
        let mut q = DispatchQueue::default();
        q.insert(CrashId::new("b"), 5);
        q.insert(CrashId::new("a"), 5);
        q.insert(CrashId::new("z"), 1);
        assert!(!q.insert(CrashId::new("a"), 0));
        let ids: Vec<_> = q.crash_ids().map(CrashId::as_str).collect();
        assert_eq!(ids, ["z", "a", "b"]);
    }

    #[test]
    fn events_replay_to_same_state() {
        let mut log = Vec::new();
        let mut e = DedupEngine::new();
        let mut emit = |p: &EventPayload| {
            log.push(p.clone());
            Ok(())
        };
        let cs: Vec<_> = (0..4).map(|i| crash(&format!("c{i}"), i)).collect();
        let all = |_: &Patch, _: &CrashReport| Resolution::Resolved;
        e.on_crash_received(cs[0].clone(), &nothing, &mut emit).unwrap();
        e.on_crash_received(cs[1].clone(), &nothing, &mut emit).unwrap();
        e.on_patch_generated(patch_for(&cs[0], "a", 2), &all, &mut emit).unwrap();
        e.on_crash_received(cs[2].clone(), &all, &mut emit).unwrap();
        e.on_crash_received(cs[3].clone(), &nothing, &mut emit).unwrap();
        e.on_patch_generated(patch_for(&cs[3], "b", 9), &all, &mut emit).unwrap();

        let mut replayed = DedupState::default();
        for p in &log {
            replayed.apply(p).unwrap();
        }
        assert_eq!(replayed, e.state);

        let json = serde_json::to_string(&e.state).unwrap();
        let mut back: DedupState = serde_json::from_str(&json).unwrap();
        back.rebuild_indexes();
        assert_eq!(back, e.state);
    }
}
