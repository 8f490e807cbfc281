use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::scenario::{AgentOverride, World};
use crate::model::{CrashId, CrashReport, Millis, Patch, SimBehavior};
use crate::orchestrator::{AgentRunner, AttemptDraw, AttemptRequest, DrawOutcome};
use crate::validation::{ResolutionOracle, SimulatedBackend};

/// Seeds the stream for one attempt. The stream depends only on the run
/// seed, the crash, the agent and the attempt number, so two strategies
/// replaying the same scenario see the same draws for the same attempt.
pub fn attempt_rng(seed: u64, crash: &CrashId, agent: &str, attempt: u32) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"cvr.sim.attempt.v1");
    h.update(seed.to_le_bytes());
    for field in [crash.as_str().as_bytes(), agent.as_bytes()] {
        h.update((field.len() as u64).to_le_bytes());
        h.update(field);
    }
    h.update(attempt.to_le_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&h.finalize());
    ChaCha8Rng::from_seed(key)
}

/// The four numbers drawn for an attempt, always in this order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Draw {
    pub u_outcome: f64,
    pub latency: Millis,
    pub cost: f64,
    pub u_wrong: f64,
}

pub fn draw(behavior: &SimBehavior, rng: &mut ChaCha8Rng) -> Draw {
    let u_outcome: f64 = rng.random();
    let latency = behavior.latency_dist.sample(rng).round().max(1.0) as Millis;
    let cost = behavior.cost_dist.sample(rng).max(0.0);
    let u_wrong: f64 = rng.random();
    Draw {
        u_outcome,
        latency,
        cost,
        u_wrong,
    }
}

/// Agent runner backed by seeded draws and a scripted validation backend.
///
/// A generated patch resolves every crash of its root cause (plus any root
/// causes it also reaches) unless the draw makes it plausible-but-wrong, in
/// which case it only resolves its own PoV. Patches for unrepairable root
/// causes resolve nothing and fail validation.
pub struct SimAgentRunner {
    seed: u64,
    world: Arc<World>,
    overrides: BTreeMap<String, AgentOverride>,
    broken_projects: BTreeSet<String>,
    backend: Arc<SimulatedBackend>,
    oracle: Arc<ResolutionOracle>,
    reach: BTreeMap<String, BTreeSet<CrashId>>,
}

impl SimAgentRunner {
    pub fn new(
        seed: u64,
        world: Arc<World>,
        overrides: BTreeMap<String, AgentOverride>,
        broken_projects: BTreeSet<String>,
        backend: Arc<SimulatedBackend>,
        oracle: Arc<ResolutionOracle>,
    ) -> Self {
        let reach = world
            .root_causes
            .keys()
            .map(|rc| (rc.clone(), world.reach(rc)))
            .collect();
        Self {
            seed,
            world,
            overrides,
            broken_projects,
            backend,
            oracle,
            reach,
        }
    }

    fn synth_diff(crash: &CrashReport, root_cause: &str, agent: &str, attempt: u32) -> String {
        format!(
            "--- a/{p}/src/{rc}.c\n+++ b/{p}/src/{rc}.c\n@@ -10,3 +10,4 @@\n   check_input(buf, len);\n+  /* {agent} attempt {attempt} for {crash} */\n+  if (len < MIN_LEN) return -1;\n",
            p = crash.project_id,
            rc = root_cause,
            crash = crash.crash_id,
        )
    }
}

impl AgentRunner for SimAgentRunner {
    fn preflight(&mut self, crash: &CrashReport) -> Result<(), String> {
        if self.broken_projects.contains(&crash.project_id) {
            Err(format!("project {} does not build without a patch", crash.project_id))
        } else {
            Ok(())
        }
    }

    fn attempt(&mut self, req: &AttemptRequest<'_>) -> AttemptDraw {
        let agent = req.agent;
        let Some(behavior) = &agent.behavior else {
            return AttemptDraw {
                outcome: DrawOutcome::AgentError(format!("agent {} has no behavior", agent.agent_name)),
                latency: 1,
                cost: 0.0,
            };
        };
        let mut rng = attempt_rng(self.seed, &req.crash.crash_id, &agent.agent_name, req.attempt);
        let d = draw(behavior, &mut rng);
        let outcome = if d.u_outcome < behavior.error_prob {
            DrawOutcome::AgentError("agent crashed".into())
        } else if d.u_outcome < behavior.error_prob + behavior.success_prob {
            self.generate(req, &d, behavior)
        } else {
            DrawOutcome::RepairFailure("no candidate produced".into())
        };
        AttemptDraw {
            outcome,
            latency: d.latency,
            cost: d.cost,
        }
    }
}

impl SimAgentRunner {
    fn generate(&mut self, req: &AttemptRequest<'_>, d: &Draw, behavior: &SimBehavior) -> DrawOutcome {
        let crash = req.crash;
        let name = &req.agent.agent_name;
        let rc = self
            .world
            .root_cause_of
            .get(&crash.crash_id)
            .cloned()
            .unwrap_or_default();
        let diff = Self::synth_diff(crash, &rc, name, req.attempt);
        let patch = match Patch::candidate(
            diff,
            name.clone(),
            crash.crash_id.clone(),
            req.now + d.latency,
            d.cost,
            d.latency,
        ) {
            Ok(p) => p,
            Err(e) => return DrawOutcome::AgentError(e.to_string()),
        };
        let reach = self.reach.get(&rc).cloned().unwrap_or_default();
        let only_origin = self.overrides.get(name).is_some_and(|o| o.resolves_only_origin)
            || d.u_wrong < behavior.plausible_but_wrong_prob;
        let resolves = if reach.is_empty() {
            BTreeSet::new()
        } else if only_origin {
            BTreeSet::from([crash.crash_id.clone()])
        } else {
            reach
        };
        let id = patch.patch_id.clone();
        self.backend.update(|m| {
            m.resolves.insert(id, resolves);
        });
        match self.oracle.validate(&patch, &[crash], true) {
            Ok(v) if v.plausible => DrawOutcome::Plausible(patch),
            Ok(_) => DrawOutcome::RepairFailure("candidate failed validation".into()),
            Err(e) => DrawOutcome::AgentError(format!("validation unavailable: {e}")),
        }
    }
}
