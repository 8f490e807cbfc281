//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function takes JSON text and returns JSON text. The plain
//! Rust functions in [`api`] do the work so they can be tested natively.

use wasm_bindgen::prelude::*;

pub mod api;

const REFERENCE: &str = include_str!("../../core/fixtures/reference_5agent.json");
const DEDUP_REPLAY: &str = include_str!("../../core/fixtures/dedup_replay.json");
const THREE_BUG: &str = include_str!("../../core/fixtures/three_bug.json");
const PLAN_AGENTS: &str = r#"[
  { "agent_name": "claude-primary", "provider_id": "anthropic", "preference_rank": 1 },
  { "agent_name": "claude-secondary", "provider_id": "anthropic", "preference_rank": 2 },
  { "agent_name": "gpt-primary", "provider_id": "openai", "preference_rank": 3 },
  { "agent_name": "gpt-secondary", "provider_id": "openai", "preference_rank": 4 },
  { "agent_name": "gemini", "provider_id": "google", "preference_rank": 5 }
]"#;

/// Built-in inputs: `reference`, `dedup`, `three_bug` or `agents`.
#[wasm_bindgen]
pub fn builtin(name: &str) -> Result<String, JsError> {
    match name {
        "reference" => Ok(REFERENCE.to_owned()),
        "dedup" => Ok(DEDUP_REPLAY.to_owned()),
        "three_bug" => Ok(THREE_BUG.to_owned()),
        "agents" => Ok(PLAN_AGENTS.to_owned()),
        other => Err(JsError::new(&format!("no built-in input named {other}"))),
    }
}

/// Runs every strategy over seeds `first..=last` and returns per-strategy
/// medians plus the per-seed rows.
#[wasm_bindgen]
pub fn compare_strategies(scenario_json: &str, first: u32, last: u32) -> Result<String, JsError> {
    api::compare_strategies(scenario_json, first as u64, last as u64).map_err(|e| JsError::new(&e))
}

/// Lane plan for a JSON list of agent profiles.
#[wasm_bindgen]
pub fn plan_lanes(agents_json: &str, num_lanes: u32) -> Result<String, JsError> {
    api::plan_lanes(agents_json, num_lanes as usize).map_err(|e| JsError::new(&e))
}

/// Simulates a scenario and reports how its crashes were grouped by patch.
#[wasm_bindgen]
pub fn dedup_replay(scenario_json: &str, seed: u32) -> Result<String, JsError> {
    api::dedup_replay(scenario_json, seed as u64).map_err(|e| JsError::new(&e))
}
