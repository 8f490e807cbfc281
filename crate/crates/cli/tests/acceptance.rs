//! Exit gate: prints one PASS/FAIL line per acceptance criterion and fails
//! the test run if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{cvr, fixture, run_ok, submission, write_config, Server};
use cvr_core::dedup::{quiescence_check, DedupEngine};
use cvr_core::model::{AgentProfile, CrashId, CrashReport, Patch, PatchId, ScanMode};
use cvr_core::orchestrator::{plan_lanes, Strategy};
use cvr_core::sim::{median, simulate, Scenario, SimMetrics};
use cvr_core::validation::{
    env_fingerprint, EnvHandle, Resolution, ResolutionMatrix, SimulatedBackend, Validator,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const DEDUP_CASES: usize = 1000;
const DEDUP_BUDGET: Duration = Duration::from_secs(10);
const SWEEP_SEEDS: u64 = 30;
const RUN_BUDGET: Duration = Duration::from_secs(1);
const SHARE_TARGET: f64 = 0.91;
const SHARE_TOL: f64 = 0.03;
const CACHE_REPEATS: usize = 100;

type Verdict = Result<String, String>;

fn load(name: &str) -> Scenario {
    Scenario::load(&fixture(name)).expect("fixture loads")
}

/// Tracks quiescence and provider peaks across every run the gate makes.
#[derive(Default)]
struct Ledger {
    runs: usize,
    schedules: usize,
    violations: usize,
    over_cap: Vec<String>,
}

impl Ledger {
    fn note(&mut self, label: &str, m: &SimMetrics) {
        self.runs += 1;
        self.schedules += 1;
        self.violations += m.quiescence_violations;
        for (p, &peak) in &m.provider_peaks {
            if let Some(&cap) = m.provider_caps.get(p) {
                if peak > cap {
                    self.over_cap.push(format!("{label}: {p} peaked at {peak} > {cap}"));
                }
            }
        }
    }
}

// Criterion 1 ------------------------------------------------------------

struct Instance {
    root_cause: Vec<usize>,
    order: Vec<usize>,
    /// `None` is an arrival; `Some(k)` repairs received crash k mod received.
    ops: Vec<Option<usize>>,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n_rc = rng.random_range(1..=5);
    let n = rng.random_range(1..=20);
    let root_cause: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_rc)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let ops = (0..rng.random_range(0..48))
        .map(|_| rng.random_bool(0.5).then(|| rng.random_range(0..64)))
        .chain(std::iter::repeat_n(None, n))
        .collect();
    Instance { root_cause, order, ops }
}

/// Every root cause that received a patch is one group of all its crashes.
fn brute_force(inst: &Instance) -> BTreeSet<BTreeSet<usize>> {
    let mut received = Vec::new();
    let mut next = 0;
    let mut patched = BTreeSet::new();
    for op in &inst.ops {
        match op {
            None => {
                if let Some(&i) = inst.order.get(next) {
                    next += 1;
                    received.push(i);
                }
            }
            Some(k) if !received.is_empty() => {
                patched.insert(inst.root_cause[received[k % received.len()]]);
            }
            Some(_) => {}
        }
    }
    patched
        .into_iter()
        .map(|rc| (0..inst.root_cause.len()).filter(|&j| inst.root_cause[j] == rc).collect())
        .collect()
}

/// Returns (partition matches oracle, quiescence violations).
fn run_instance(inst: &Instance) -> (bool, usize) {
    let crashes: Vec<CrashReport> = inst
        .root_cause
        .iter()
        .enumerate()
        .map(|(i, &rc)| {
            CrashReport::new(format!("proj-{}", rc % 2), "h", format!("pov-{i}"), format!("rc{rc}"), ScanMode::Full, i as u64)
                .unwrap()
        })
        .collect();
    let mut resolves: BTreeMap<PatchId, BTreeSet<CrashId>> = BTreeMap::new();
    let mut engine = DedupEngine::new();
    let mut received = Vec::new();
    let mut next = 0;
    let mut emit = |_: &cvr_core::event::EventPayload| Ok(());
    for (serial, op) in inst.ops.iter().enumerate() {
        let resolver = |p: &Patch, c: &CrashReport| {
            if resolves.get(&p.patch_id).is_some_and(|s| s.contains(&c.crash_id)) {
                Resolution::Resolved
            } else {
                Resolution::StillCrashes
            }
        };
        match op {
            None => {
                if let Some(&i) = inst.order.get(next) {
                    next += 1;
                    received.push(i);
                    engine.on_crash_received(crashes[i].clone(), &resolver, &mut emit).unwrap();
                }
            }
            Some(k) if !received.is_empty() => {
                let origin = received[k % received.len()];
                let patch = Patch::candidate(
                    format!("@@ -1 +1 @@\n+fix {serial}\n"),
                    "agent",
                    crashes[origin].crash_id.clone(),
                    serial as u64,
                    1.0,
                    1,
                )
                .unwrap();
                let reach = (0..crashes.len())
                    .filter(|&j| inst.root_cause[j] == inst.root_cause[origin])
                    .map(|j| crashes[j].crash_id.clone())
                    .collect();
                resolves.insert(patch.patch_id.clone(), reach);
                let resolver = |p: &Patch, c: &CrashReport| {
                    if resolves.get(&p.patch_id).is_some_and(|s| s.contains(&c.crash_id)) {
                        Resolution::Resolved
                    } else {
                        Resolution::StillCrashes
                    }
                };
                engine.on_patch_generated(patch, &resolver, &mut emit).unwrap();
            }
            Some(_) => {}
        }
    }
    let resolver = |p: &Patch, c: &CrashReport| {
        if resolves.get(&p.patch_id).is_some_and(|s| s.contains(&c.crash_id)) {
            Resolution::Resolved
        } else {
            Resolution::StillCrashes
        }
    };
    let violations = quiescence_check(&engine.state, &resolver).len();
    let got: BTreeSet<BTreeSet<CrashId>> = engine.state.store().partition().into_values().collect();
    let expected: BTreeSet<BTreeSet<CrashId>> = brute_force(inst)
        .into_iter()
        .map(|g| g.into_iter().map(|i| crashes[i].crash_id.clone()).collect())
        .collect();
    (got == expected, violations)
}

fn dedup_oracle(ledger: &mut Ledger) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let started = Instant::now();
    let mut matched = 0;
    for _ in 0..DEDUP_CASES {
        let (ok, violations) = run_instance(&random_instance(&mut rng));
        matched += ok as usize;
        ledger.runs += 1;
        ledger.violations += violations;
    }
    let elapsed = started.elapsed();
    let msg = format!("{matched}/{DEDUP_CASES} partitions match the oracle in {elapsed:.2?} (limit {DEDUP_BUDGET:?})");
    if matched == DEDUP_CASES && elapsed < DEDUP_BUDGET {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// Criterion 3 ------------------------------------------------------------

fn replay_fixture(ledger: &mut Ledger) -> Verdict {
    let m = simulate(&load("dedup_replay.json")).map_err(|e| e.to_string())?.metrics;
    ledger.note("dedup_replay", &m);
    let d = &m.dedup;
    let three = simulate(&load("three_bug.json")).map_err(|e| e.to_string())?.metrics;
    ledger.note("three_bug", &three);
    let t = &three.dedup;
    let msg = format!(
        "povs_total={} povs_deduplicated={} patches_stored={}; three-bug: {} patch covering {} crashes",
        d.povs_total,
        d.povs_deduplicated,
        d.patches_stored,
        t.patches_stored,
        t.povs_deduplicated + t.patches_stored
    );
    let ok = (d.povs_total, d.povs_deduplicated, d.patches_stored) == (122, 65, 42)
        && (t.povs_total, t.patches_stored, t.povs_deduplicated, t.povs_unresolved) == (3, 1, 2, 0);
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// Criterion 4 ------------------------------------------------------------

fn ordering(ledger: &mut Ledger) -> Verdict {
    let base = load("reference_5agent.json");
    let mut lat: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut cost: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut slowest = Duration::ZERO;
    for seed in 1..=SWEEP_SEEDS {
        for strategy in Strategy::ALL {
            let sc = base.with_seed(seed).with_strategy(strategy);
            let t = Instant::now();
            let m = simulate(&sc).map_err(|e| e.to_string())?.metrics;
            slowest = slowest.max(t.elapsed());
            ledger.note(&format!("reference seed {seed} {}", strategy.short_name()), &m);
            lat.entry(strategy.short_name()).or_default().push(m.median_latency_ms);
            cost.entry(strategy.short_name()).or_default().push(m.median_cost);
        }
    }
    let l = |s: Strategy| median(&lat[s.short_name()]);
    let c = |s: Strategy| median(&cost[s.short_name()]);
    let (seq, fp2, par) = (Strategy::Sequential, Strategy::Fp2, Strategy::Parallel);
    let msg = format!(
        "latency min P={:.1} FP2={:.1} S={:.1}; cost P={:.3} FP2={:.3} S={:.3}; slowest run {slowest:.2?}",
        l(par) / 60_000.0,
        l(fp2) / 60_000.0,
        l(seq) / 60_000.0,
        c(par),
        c(fp2),
        c(seq)
    );
    let ok = l(par) <= l(fp2) && l(fp2) <= l(seq) && c(seq) <= c(fp2) && c(fp2) <= c(par) && slowest < RUN_BUDGET;
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// Criterion 5 ------------------------------------------------------------

fn top_share(ledger: &mut Ledger) -> Verdict {
    let sc = load("top_agent_share.json");
    let top = sc.agents.iter().min_by_key(|a| a.preference_rank).unwrap();
    let p = top.behavior.as_ref().map(|b| b.success_prob).unwrap_or_default();
    let m = simulate(&sc).map_err(|e| e.to_string())?.metrics;
    ledger.note("top_agent_share", &m);
    let msg = format!(
        "top agent success_prob {p}, {} tasks, share {:.4} (target {SHARE_TARGET} +/- {SHARE_TOL})",
        m.tasks + m.tasks_cancelled,
        m.top_agent_share
    );
    let ok = p == SHARE_TARGET
        && m.tasks + m.tasks_cancelled == 10_000
        && m.strategy == Strategy::Fp2
        && (m.top_agent_share - SHARE_TARGET).abs() <= SHARE_TOL;
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// Criterion 6 ------------------------------------------------------------

fn fault_injection(ledger: &mut Ledger) -> Verdict {
    let base = load("reference_5agent.json");
    let n = base.agents.len();
    let mut subsets = 0;
    let mut errors = Vec::new();
    for mask in 1u32..(1 << n) - 1 {
        subsets += 1;
        let mut sc = base.clone();
        for (i, a) in sc.agents.iter_mut().enumerate() {
            if mask & (1 << i) != 0 {
                let b = a.behavior.as_mut().expect("simulated agent");
                b.success_prob = 0.0;
                b.error_prob = 1.0;
            }
        }
        for strategy in Strategy::ALL {
            let m = simulate(&sc.with_strategy(strategy)).map_err(|e| e.to_string())?.metrics;
            ledger.note(&format!("faults {mask:05b} {}", strategy.short_name()), &m);
            if m.error > 0 {
                errors.push(format!("{mask:05b}/{}: {}", strategy.short_name(), m.error));
            }
        }
    }
    let msg = format!("{subsets} subsets x 3 strategies, Error outcomes: {}", errors.len());
    if subsets == 30 && errors.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg} {errors:?}"))
    }
}

// Criterion 7 ------------------------------------------------------------

fn provider_caps(ledger: &Ledger) -> Verdict {
    let agents: Vec<AgentProfile> = [("a1", "provA"), ("a2", "provA"), ("a3", "provB"), ("a4", "provB")]
        .iter()
        .enumerate()
        .map(|(i, (n, p))| AgentProfile::new(*n, *p, i as u32 + 1))
        .collect();
    let plan = plan_lanes(&agents, 2).map_err(|e| e.to_string())?;
    let provider = |name: &str| agents.iter().find(|a| a.agent_name == name).unwrap().provider_id.clone();
    let heads: Vec<String> = plan.heads().map(provider).collect();
    let msg = format!(
        "{} simulated schedules, {} cap breaches; 2-provider heads {heads:?}",
        ledger.schedules,
        ledger.over_cap.len()
    );
    if ledger.over_cap.is_empty() && heads.len() == 2 && heads[0] != heads[1] {
        Ok(msg)
    } else {
        Err(format!("{msg} {:?}", ledger.over_cap))
    }
}

// Criterion 8 ------------------------------------------------------------

fn cache() -> Verdict {
    let c = CrashReport::new("libfoo", "fuzz", b"AAAA".to_vec(), "asan", ScanMode::Full, 0).unwrap();
    let p = Patch::candidate("@@ -1 +1 @@\n+fix\n", "agent", c.crash_id.clone(), 0, 1.0, 1).unwrap();
    let backend = Arc::new(SimulatedBackend::new(ResolutionMatrix {
        resolves: [(p.patch_id.clone(), BTreeSet::from([c.crash_id.clone()]))].into(),
        ..Default::default()
    }));
    let env = |fp: String| EnvHandle {
        env_id: format!("env-{fp}"),
        fingerprint: fp,
        project_id: "libfoo".into(),
        variant: "default".into(),
    };
    let same = Validator::new(backend.clone());
    let e = env(env_fingerprint("libfoo", "default", "clang-18"));
    for _ in 0..CACHE_REPEATS {
        same.validate(&p, &[&c], true, &e);
    }
    let distinct = Validator::new(backend);
    for tag in ["clang-17", "clang-18", "gcc-13"] {
        distinct.validate(&p, &[&c], true, &env(env_fingerprint("libfoo", "default", tag)));
    }
    let msg = format!(
        "{CACHE_REPEATS} identical keys -> {} invocation(s); 3 fingerprints -> {} invocations",
        same.backend_invocations(),
        distinct.backend_invocations()
    );
    if same.backend_invocations() == 1 && distinct.backend_invocations() == 3 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// Criterion 9 ------------------------------------------------------------

fn determinism_and_recovery() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut identical = true;
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        run_ok(
            cvr()
                .args(["simulate", "--seed", "42", "--out"])
                .arg(d)
                .arg("--scenario")
                .arg(fixture("dedup_replay.json")),
        );
    }
    for f in ["metrics.json", "tasks.csv", "events.jsonl"] {
        identical &= fs::read(dirs[0].join(f)).ok() == fs::read(dirs[1].join(f)).ok();
    }

    let serve_dir = tmp.path().join("serve");
    fs::create_dir_all(&serve_dir).map_err(|e| e.to_string())?;
    let config = write_config(&serve_dir);
    let server = Server::start(&config);
    for pov in [b"AAAA", b"BBBB", b"CCCC"] {
        server.post("/crashes", &submission(pov));
    }
    run_ok(
        cvr()
            .args(["work", "--max-tasks", "1", "--server", &server.base, "--config"])
            .arg(&config),
    );
    let before: Value = server.get("/state");
    server.kill();
    let server = Server::start(&config);
    let after: Value = server.get("/state");
    drop(server);
    let recovered = before == after;
    let queued = before["dedup"]["queue"]["entries"].as_array().map_or(0, Vec::len);

    let msg = format!("simulate --seed 42 identical: {identical}; serve state after kill -9 and replay identical: {recovered} ({queued} crash(es) still queued)");
    if identical && recovered {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() -> ExitCode {
    let mut ledger = Ledger::default();
    let mut results: Vec<(u8, &str, Verdict)> = vec![
        (1, "dedup oracle equivalence", dedup_oracle(&mut ledger)),
        (3, "replay fixture", replay_fixture(&mut ledger)),
        (4, "strategy ordering", ordering(&mut ledger)),
        (5, "top-agent share", top_share(&mut ledger)),
        (6, "zero errors under faults", fault_injection(&mut ledger)),
    ];
    // Every fixture shipped with the repository, beyond those above.
    for name in ["dedup_replay.json", "three_bug.json", "reference_5agent.json", "top_agent_share.json"] {
        for strategy in Strategy::ALL {
            if let Ok(run) = simulate(&load(name).with_strategy(strategy)) {
                ledger.note(name, &run.metrics);
            }
        }
    }
    let quiescence = {
        let msg = format!("{} runs, {} violations", ledger.runs, ledger.violations);
        if ledger.violations == 0 {
            Ok(msg)
        } else {
            Err(msg)
        }
    };
    results.push((2, "quiescence", quiescence));
    results.push((7, "provider constraint", provider_caps(&ledger)));
    results.push((8, "validation cache", cache()));
    results.push((9, "determinism and recovery", determinism_and_recovery()));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, verdict) in &results {
        match verdict {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
