use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cvr_core::dedup::quiescence_check;
use cvr_core::event::check_event_order;
use cvr_core::model::{CrashReport, Patch};
use cvr_core::orchestrator::Strategy;
use cvr_core::service::{render_log, replay_file, Config};
use cvr_core::sim::{self, Scenario};
use cvr_core::validation::{Resolution, ResolutionMatrix, Resolver};

pub fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "seq" | "sequential" => Ok(Strategy::Sequential),
        "par" | "parallel" => Ok(Strategy::Parallel),
        "fp2" => Ok(Strategy::Fp2),
        other => Err(format!("unknown strategy {other:?} (expected seq, par or fp2)")),
    }
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = spec.split_once("..") {
        let a: u64 = a.trim().parse().context("seed range start")?;
        let b: u64 = b.trim().parse().context("seed range end")?;
        if b < a {
            bail!("empty seed range {spec}");
        }
        return Ok((a..=b).collect());
    }
    let seeds = spec
        .split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("at least one seed is required");
    }
    Ok(seeds)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn simulate(scenario: &Path, strategy: Option<Strategy>, seed: Option<u64>, out: &Path) -> Result<ExitCode> {
    let mut sc = Scenario::load(scenario)?;
    if let Some(s) = strategy {
        sc.strategy = s;
    }
    if let Some(s) = seed {
        sc.seed = s;
    }
    let run = sim::simulate(&sc)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("metrics.json"), &(serde_json::to_string_pretty(&run.metrics)? + "\n"))?;
    write(&out.join("tasks.csv"), &sim::tasks_csv(&run.runs))?;
    write(&out.join("events.jsonl"), &render_log(&run.events)?)?;
    write(&out.join("matrix.json"), &(serde_json::to_string_pretty(&run.matrix)? + "\n"))?;

    let m = &run.metrics;
    println!(
        "{} seed={} strategy={}: {} tasks ({} success, {} failure, {} error), median latency {:.0} ms, median cost {:.3}",
        if m.scenario.is_empty() { "scenario" } else { &m.scenario },
        m.seed,
        m.strategy.short_name(),
        m.tasks,
        m.success,
        m.failure,
        m.error,
        m.median_latency_ms,
        m.median_cost
    );
    println!(
        "dedup: {} povs, {} deduplicated, {} patches stored, {} unresolved",
        m.dedup.povs_total, m.dedup.povs_deduplicated, m.dedup.patches_stored, m.dedup.povs_unresolved
    );
    if !run.violations.is_empty() {
        eprintln!("{} quiescence violations", run.violations.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn sweep(scenario: &Path, strategies: &str, seeds: &str, out: Option<&Path>) -> Result<ExitCode> {
    let sc = Scenario::load(scenario)?;
    let strategies = strategies
        .split(',')
        .map(parse_strategy)
        .collect::<Result<Vec<_>, _>>()
        .map_err(anyhow::Error::msg)?;
    let seeds = parse_seeds(seeds)?;
    let result = sim::sweep(&sc, &strategies, &seeds)?;
    println!(
        "{:<6} {:>5} {:>18} {:>12} {:>14} {:>10}",
        "strat", "runs", "median lat (min)", "median cost", "pooled lat", "success"
    );
    for s in &result.summaries {
        println!(
            "{:<6} {:>5} {:>18.1} {:>12.3} {:>14.1} {:>9.1}%",
            s.strategy.short_name(),
            s.runs,
            s.median_latency_ms / 60_000.0,
            s.median_cost,
            s.pooled_median_latency_ms / 60_000.0,
            s.success_rate * 100.0
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write(&dir.join("sweep.csv"), &result.to_csv())?;
        write(&dir.join("summary.json"), &(serde_json::to_string_pretty(&result.summaries)? + "\n"))?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn replay(log: &Path, state_out: Option<&Path>) -> Result<ExitCode> {
    let rec = replay_file(log)?;
    let s = &rec.state;
    let open = s.tasks.tasks.values().filter(|t| t.is_open()).count();
    println!("last seq {}", s.last_seq);
    if let Some(snap) = rec.from_snapshot {
        println!("resumed from snapshot at seq {snap}");
    }
    println!("events applied {}", rec.events_applied);
    if rec.dropped_tail {
        println!("dropped a truncated final line");
    }
    println!("crashes {}", s.dedup.crashes().len());
    println!("queue {}", s.dedup.queue().len());
    println!("patches {} live, {} superseded", s.dedup.store().len(), s.dedup.store().superseded().len());
    println!("tasks {} ({} open)", s.tasks.tasks.len(), open);
    if let Some(path) = state_out {
        write(path, &(serde_json::to_string_pretty(s)? + "\n"))?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Answers from a saved matrix; unknown pairs still crash.
struct MatrixResolver(ResolutionMatrix);

impl Resolver for MatrixResolver {
    fn resolve(&self, patch: &Patch, crash: &CrashReport) -> Resolution {
        if self.0.resolves(&patch.patch_id, &crash.crash_id) {
            Resolution::Resolved
        } else {
            Resolution::StillCrashes
        }
    }
}

pub fn check(log: &Path, matrix: Option<&Path>, config: Option<&Path>) -> Result<ExitCode> {
    let text = fs::read_to_string(log).with_context(|| format!("reading {}", log.display()))?;
    let rec = cvr_core::service::replay_str(&text)?;
    let events: Vec<cvr_core::event::Event> = text
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("{\"snapshot\":") && !l.trim().is_empty())
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect();
    let mut problems = check_event_order(&events);

    let violations = match (matrix, config) {
        (Some(path), _) => {
            let m: ResolutionMatrix = serde_json::from_str(
                &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
            )?;
            quiescence_check(&rec.state.dedup, &MatrixResolver(m))
        }
        (None, Some(path)) => {
            let oracle = Config::load(path)?.validation.build_oracle();
            quiescence_check(&rec.state.dedup, &oracle)
        }
        (None, None) => {
            println!("no resolver given: checking structure only");
            quiescence_check(&rec.state.dedup, &|_: &Patch, _: &CrashReport| Resolution::StillCrashes)
        }
    };
    for v in &violations {
        problems.push(serde_json::to_string(v)?);
    }
    if problems.is_empty() {
        println!("ok: {} events, 0 violations", rec.state.last_seq);
        Ok(ExitCode::SUCCESS)
    } else {
        for p in &problems {
            println!("{p}");
        }
        println!("{} violations", problems.len());
        Ok(ExitCode::FAILURE)
    }
}

pub fn plan(config: &Path, json: bool) -> Result<ExitCode> {
    let config = Config::load(config)?;
    let plan = config.lane_plan()?;
    if json {
        println!("{}", serde_json::to_string_pretty(&plan)?);
    } else {
        let provider = |name: &str| {
            config
                .agents
                .iter()
                .find(|a| a.agent_name == name)
                .map(|a| a.provider_id.as_str())
                .unwrap_or("?")
        };
        println!("strategy {}", config.strategy.short_name());
        for (i, lane) in plan.lanes.iter().enumerate() {
            let chain: Vec<String> = lane.iter().map(|a| format!("{a} ({})", provider(a))).collect();
            println!("lane {i}: {}", chain.join(" -> "));
        }
    }
    let problems = plan.check(&config.agents);
    for p in &problems {
        eprintln!("warning: {p}");
    }
    Ok(ExitCode::SUCCESS)
}
