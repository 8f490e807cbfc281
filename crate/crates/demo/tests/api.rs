use cvr_demo::api;
use serde_json::Value;

const REFERENCE: &str = include_str!("../../core/fixtures/reference_5agent.json");
const THREE_BUG: &str = include_str!("../../core/fixtures/three_bug.json");

#[test]
fn compare_returns_one_summary_per_strategy() {
    let v: Value = serde_json::from_str(&api::compare_strategies(REFERENCE, 1, 3).unwrap()).unwrap();
    assert_eq!(v["summaries"].as_array().unwrap().len(), 3);
    assert_eq!(v["rows"].as_array().unwrap().len(), 9);
}

#[test]
fn compare_rejects_bad_ranges() {
    assert!(api::compare_strategies(REFERENCE, 5, 1).is_err());
    assert!(api::compare_strategies(REFERENCE, 0, api::MAX_SEEDS).is_err());
    assert!(api::compare_strategies("{", 1, 1).is_err());
}

#[test]
fn plan_view_lists_providers() {
    let agents = r#"[
        { "agent_name": "a1", "provider_id": "A", "preference_rank": 1 },
        { "agent_name": "a2", "provider_id": "A", "preference_rank": 2 },
        { "agent_name": "b1", "provider_id": "B", "preference_rank": 3 }
    ]"#;
    let v: Value = serde_json::from_str(&api::plan_lanes(agents, 2).unwrap()).unwrap();
    let lanes = v["lanes"].as_array().unwrap();
    assert_eq!(lanes.len(), 2);
    assert_eq!(lanes[0][0]["provider"], "A");
    assert_eq!(lanes[1][0]["provider"], "B");
    assert!(api::plan_lanes(agents, 0).is_err());
}

#[test]
fn dedup_groups_three_bugs_under_one_patch() {
    let v: Value = serde_json::from_str(&api::dedup_replay(THREE_BUG, 7).unwrap()).unwrap();
    let groups = v["groups"].as_array().unwrap();
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0]["crashes"], 3);
    assert_eq!(groups[0]["root_causes"].as_object().unwrap().len(), 3);
    assert!(v["unresolved"].as_object().unwrap().is_empty());
}
