use std::collections::BTreeMap;

use cvr_core::model::AgentProfile;
use cvr_core::orchestrator::{self, Strategy};
use cvr_core::service::CoordinatorState;
use cvr_core::sim::{self, Scenario};
use serde::Serialize;

/// Keeps a browser tab responsive.
pub const MAX_SEEDS: u64 = 200;

fn scenario(json: &str) -> Result<Scenario, String> {
    Scenario::from_json(json).map_err(|e| e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

pub fn compare_strategies(scenario_json: &str, first: u64, last: u64) -> Result<String, String> {
    if last < first {
        return Err(format!("empty seed range {first}..{last}"));
    }
    if last - first + 1 > MAX_SEEDS {
        return Err(format!("at most {MAX_SEEDS} seeds per comparison"));
    }
    let base = scenario(scenario_json)?;
    let seeds: Vec<u64> = (first..=last).collect();
    let sweep = sim::sweep(&base, &Strategy::ALL, &seeds).map_err(|e| e.to_string())?;
    to_json(&sweep)
}

#[derive(Serialize)]
struct LaneAgent<'a> {
    agent: &'a str,
    provider: &'a str,
    rank: u32,
}

#[derive(Serialize)]
struct PlanView<'a> {
    lanes: Vec<Vec<LaneAgent<'a>>>,
    warnings: Vec<String>,
}

pub fn plan_lanes(agents_json: &str, num_lanes: usize) -> Result<String, String> {
    let agents: Vec<AgentProfile> = serde_json::from_str(agents_json).map_err(|e| e.to_string())?;
    let plan = orchestrator::plan_lanes(&agents, num_lanes).map_err(|e| e.to_string())?;
    let by_name: BTreeMap<&str, &AgentProfile> = agents.iter().map(|a| (a.agent_name.as_str(), a)).collect();
    let lanes = plan
        .lanes
        .iter()
        .map(|lane| {
            lane.iter()
                .map(|name| {
                    let a = by_name[name.as_str()];
                    LaneAgent {
                        agent: &a.agent_name,
                        provider: &a.provider_id,
                        rank: a.preference_rank,
                    }
                })
                .collect()
        })
        .collect();
    to_json(&PlanView {
        lanes,
        warnings: plan.check(&agents),
    })
}

#[derive(Serialize)]
struct Group {
    patch_id: String,
    agent: String,
    /// Root cause name -> crashes of it covered by this patch.
    root_causes: BTreeMap<String, usize>,
    crashes: usize,
}

#[derive(Serialize)]
struct DedupView {
    metrics: sim::SimMetrics,
    groups: Vec<Group>,
    /// Root cause name -> crashes still waiting for a patch.
    unresolved: BTreeMap<String, usize>,
}

pub fn dedup_replay(scenario_json: &str, seed: u64) -> Result<String, String> {
    let sc = scenario(scenario_json)?.with_seed(seed);
    let world = sc.materialize().map_err(|e| e.to_string())?;
    let run = sim::simulate(&sc).map_err(|e| e.to_string())?;
    let state = CoordinatorState::replay(&run.events).map_err(|e| e.to_string())?;
    let rc = |c| world.root_cause_of.get(c).cloned().unwrap_or_else(|| "?".into());

    let mut groups: Vec<Group> = state
        .dedup
        .store()
        .patches()
        .values()
        .map(|p| {
            let mut root_causes = BTreeMap::new();
            for c in &p.covered_povs {
                *root_causes.entry(rc(c)).or_insert(0) += 1;
            }
            Group {
                patch_id: p.patch_id.to_string(),
                agent: p.origin_agent.clone(),
                root_causes,
                crashes: p.covered_povs.len(),
            }
        })
        .collect();
    groups.sort_by(|a, b| b.crashes.cmp(&a.crashes).then_with(|| a.patch_id.cmp(&b.patch_id)));

    let mut unresolved = BTreeMap::new();
    for e in state.dedup.queue().entries() {
        *unresolved.entry(rc(&e.crash_id)).or_insert(0) += 1;
    }
    to_json(&DedupView {
        metrics: run.metrics,
        groups,
        unresolved,
    })
}
