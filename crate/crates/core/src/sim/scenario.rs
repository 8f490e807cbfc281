use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_unique_ranks, AgentProfile, CrashId, CrashReport, Millis, ScanMode};
use crate::orchestrator::{ProviderQuota, Strategy, DEFAULT_TICK_MS};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootCause {
    pub id: String,
    /// An unrepairable root cause gets candidate patches that never
    /// validate.
    #[serde(default = "yes")]
    pub repairable: bool,
    /// Other root causes a patch for this one also fixes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub also_resolves: Vec<String>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrashSpec {
    pub project_id: String,
    #[serde(default = "default_harness")]
    pub harness_id: String,
    /// PoV bytes as text. Defaults to a value derived from the root cause
    /// and the crash's position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pov: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sanitizer_signature: Option<String>,
    #[serde(default)]
    pub mode: ScanMode,
    pub arrival_offset_ms: Millis,
    pub root_cause: String,
}

fn default_harness() -> String {
    "fuzz".into()
}

/// A generated stream: crash `i` belongs to root cause
/// `i / povs_per_root_cause`, which lives in project
/// `root_cause % projects`, and arrives at `start_ms + i * interarrival_ms`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrashStream {
    pub count: usize,
    #[serde(default = "one")]
    pub projects: usize,
    #[serde(default = "one")]
    pub povs_per_root_cause: usize,
    pub interarrival_ms: Millis,
    #[serde(default)]
    pub start_ms: Millis,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentOverride {
    /// Every plausible patch from this agent resolves only its own PoV.
    #[serde(default)]
    pub resolves_only_origin: bool,
}

fn default_lanes() -> usize {
    2
}

fn default_tick() -> Millis {
    DEFAULT_TICK_MS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "default_lanes")]
    pub num_lanes: usize,
    /// Maximum concurrently running repair tasks; unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default = "default_tick")]
    pub tick_ms: Millis,
    pub agents: Vec<AgentProfile>,
    #[serde(default)]
    pub quotas: Vec<ProviderQuota>,
    /// Root causes not listed here are repairable with no extra reach.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub root_causes: Vec<RootCause>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub crashes: Vec<CrashSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<CrashStream>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub agent_overrides: BTreeMap<String, AgentOverride>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub projects_without_tests: BTreeSet<String>,
    /// Projects whose unpatched build fails, so every task on them ends in
    /// a system-level error.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub broken_projects: BTreeSet<String>,
}

/// A scenario expanded into concrete crash reports.
#[derive(Clone, Debug)]
pub struct World {
    /// In arrival order.
    pub crashes: Vec<CrashReport>,
    pub root_cause_of: BTreeMap<CrashId, String>,
    pub members: BTreeMap<String, BTreeSet<CrashId>>,
    pub root_causes: BTreeMap<String, RootCause>,
}

impl World {
    /// Crashes that a correct patch for `root_cause` resolves.
    pub fn reach(&self, root_cause: &str) -> BTreeSet<CrashId> {
        let Some(rc) = self.root_causes.get(root_cause) else {
            return BTreeSet::new();
        };
        if !rc.repairable {
            return BTreeSet::new();
        }
        let mut out = self.members.get(root_cause).cloned().unwrap_or_default();
        for other in &rc.also_resolves {
            out.extend(self.members.get(other).cloned().unwrap_or_default());
        }
        out
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn crash_specs(&self) -> Vec<CrashSpec> {
        let mut specs = self.crashes.clone();
        if let Some(s) = &self.stream {
            let per = s.povs_per_root_cause.max(1);
            let projects = s.projects.max(1);
            for i in 0..s.count {
                let rc = i / per;
                specs.push(CrashSpec {
                    project_id: format!("proj-{:04}", rc % projects),
                    harness_id: default_harness(),
                    pov: None,
                    sanitizer_signature: None,
                    mode: ScanMode::Full,
                    arrival_offset_ms: s.start_ms + i as Millis * s.interarrival_ms,
                    root_cause: format!("rc-{rc:05}"),
                });
            }
        }
        specs
    }

    /// Checks the scenario and expands it. All problems are reported at once.
    pub fn materialize(&self) -> Result<World> {
        let mut problems = Vec::new();
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            problems.push(format!(
                "schema_version {} is not supported (expected {SCENARIO_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.agents.is_empty() {
            problems.push("at least one agent is required".into());
        }
        for a in &self.agents {
            if let Err(e) = a.validate() {
                problems.push(e.to_string());
            }
            if a.behavior.is_none() {
                problems.push(format!("agent {} has no simulated behavior", a.agent_name));
            }
        }
        if let Err(e) = check_unique_ranks(&self.agents) {
            problems.push(e.to_string());
        }
        if self.num_lanes == 0 {
            problems.push("num_lanes must be at least 1".into());
        }
        if self.workers == Some(0) {
            problems.push("workers must be at least 1".into());
        }
        if self.tick_ms == 0 {
            problems.push("tick_ms must be positive".into());
        }
        let providers: BTreeSet<&str> = self.agents.iter().map(|a| a.provider_id.as_str()).collect();
        for q in &self.quotas {
            if let Err(e) = q.validate() {
                problems.push(e.to_string());
            }
            if !providers.contains(q.provider_id.as_str()) {
                problems.push(format!("quota for provider {} matches no agent", q.provider_id));
            }
        }
        let names: BTreeSet<&str> = self.agents.iter().map(|a| a.agent_name.as_str()).collect();
        for name in self.agent_overrides.keys() {
            if !names.contains(name.as_str()) {
                problems.push(format!("override for unknown agent {name}"));
            }
        }

        let mut root_causes: BTreeMap<String, RootCause> = BTreeMap::new();
        for rc in &self.root_causes {
            if root_causes.insert(rc.id.clone(), rc.clone()).is_some() {
                problems.push(format!("root cause {} declared twice", rc.id));
            }
        }
        let specs = self.crash_specs();
        if specs.is_empty() {
            problems.push("the scenario has no crashes".into());
        }
        let mut crashes = Vec::with_capacity(specs.len());
        let mut root_cause_of = BTreeMap::new();
        let mut members: BTreeMap<String, BTreeSet<CrashId>> = BTreeMap::new();
        let mut seen = HashSet::new();
        let mut prev_arrival = 0;
        for (i, spec) in specs.iter().enumerate() {
            if spec.root_cause.is_empty() {
                problems.push(format!("crash #{i} has no root cause"));
                continue;
            }
            if spec.arrival_offset_ms < prev_arrival {
                problems.push(format!(
                    "crash #{i} arrives at {} ms, before its predecessor ({prev_arrival} ms)",
                    spec.arrival_offset_ms
                ));
            }
            prev_arrival = prev_arrival.max(spec.arrival_offset_ms);
            let pov = spec
                .pov
                .clone()
                .unwrap_or_else(|| format!("{}#{i}", spec.root_cause));
            let sig = spec
                .sanitizer_signature
                .clone()
                .unwrap_or_else(|| format!("sim:{}", spec.root_cause));
            let crash = match CrashReport::new(
                spec.project_id.clone(),
                spec.harness_id.clone(),
                pov.into_bytes(),
                sig,
                spec.mode,
                spec.arrival_offset_ms,
            ) {
                Ok(c) => c,
                Err(e) => {
                    problems.push(format!("crash #{i}: {e}"));
                    continue;
                }
            };
            if !seen.insert(crash.crash_id.clone()) {
                problems.push(format!("crash #{i} repeats an earlier crash's identity"));
                continue;
            }
            root_causes.entry(spec.root_cause.clone()).or_insert_with(|| RootCause {
                id: spec.root_cause.clone(),
                repairable: true,
                also_resolves: Vec::new(),
            });
            root_cause_of.insert(crash.crash_id.clone(), spec.root_cause.clone());
            members
                .entry(spec.root_cause.clone())
                .or_default()
                .insert(crash.crash_id.clone());
            crashes.push(crash);
        }
        for rc in root_causes.values() {
            for other in &rc.also_resolves {
                if !root_causes.contains_key(other) {
                    problems.push(format!("root cause {} also_resolves unknown {other}", rc.id));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::InvalidScenario(problems));
        }
        Ok(World {
            crashes,
            root_cause_of,
            members,
            root_causes,
        })
    }

    /// The same scenario restricted to the given root causes.
    pub fn restrict_to(&self, root_causes: &[&str]) -> Scenario {
        let keep: BTreeSet<&str> = root_causes.iter().copied().collect();
        let mut out = self.clone();
        out.crashes = self
            .crash_specs()
            .into_iter()
            .filter(|c| keep.contains(c.root_cause.as_str()))
            .collect();
        out.stream = None;
        out.root_causes = self
            .root_causes
            .iter()
            .filter(|r| keep.contains(r.id.as_str()))
            .cloned()
            .map(|mut r| {
                r.also_resolves.retain(|o| keep.contains(o.as_str()));
                r
            })
            .collect();
        out
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Scenario {
        Scenario {
            strategy,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Scenario {
        Scenario { seed, ..self.clone() }
    }
}
