//! Worker process: claims tasks from a coordinator, runs the lane plan with
//! real agent commands and reports back.
//!
//! Agents run one at a time on this host. Each attempt's measured wall time
//! becomes its latency, and the lane engine orders completions by those
//! latencies, so winner selection is the same as if the lanes had run side
//! by side.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use cvr_core::event::EventPayload;
use cvr_core::model::{CrashReport, Millis, Patch, TaskId};
use cvr_core::orchestrator::{run_task, AgentRunner, AttemptDraw, AttemptRequest, DrawOutcome, EngineOutput};
use cvr_core::service::{Config, TaskResult};
use cvr_core::validation::ResolutionOracle;

use crate::serve::{now_ms, Claim};

/// Runs `agent.command` through `sh -c` with these substitutions:
/// `{crash_id}`, `{project}`, `{harness}`, `{sanitizer}`, `{pov_file}`,
/// `{attempt}` and `{work_dir}`. Exit 0 with a unified diff on stdout is a
/// candidate; exit 0 without one, or exit 1, is a repair failure; anything
/// else is an agent error. A stderr line `cost=<number>` reports spend.
struct CommandRunner<'a> {
    oracle: &'a ResolutionOracle,
    work_dir: PathBuf,
}

fn substitute(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_owned();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

struct Finished {
    code: Option<i32>,
    stdout: String,
    stderr: String,
    elapsed: Millis,
    timed_out: bool,
}

fn run_with_timeout(command: &str, dir: &Path, timeout: Duration) -> std::io::Result<Finished> {
    let started = Instant::now();
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let mut out_pipe = child.stdout.take().expect("piped");
    let mut err_pipe = child.stderr.take().expect("piped");
    let out_reader = thread::spawn(move || {
        let mut s = String::new();
        let _ = out_pipe.read_to_string(&mut s);
        s
    });
    let err_reader = thread::spawn(move || {
        let mut s = String::new();
        let _ = err_pipe.read_to_string(&mut s);
        s
    });
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if started.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            timed_out = true;
            break None;
        }
        thread::sleep(Duration::from_millis(10));
    };
    Ok(Finished {
        code: status.and_then(|s| s.code()),
        stdout: out_reader.join().unwrap_or_default(),
        stderr: err_reader.join().unwrap_or_default(),
        elapsed: started.elapsed().as_millis() as Millis,
        timed_out,
    })
}

fn reported_cost(stderr: &str) -> f64 {
    stderr
        .lines()
        .filter_map(|l| l.trim().strip_prefix("cost="))
        .filter_map(|v| v.trim().parse::<f64>().ok())
        .rfind(|c| c.is_finite() && *c >= 0.0)
        .unwrap_or(0.0)
}

impl AgentRunner for CommandRunner<'_> {
    fn attempt(&mut self, req: &AttemptRequest<'_>) -> AttemptDraw {
        let agent = req.agent;
        let error = |msg: String| AttemptDraw {
            outcome: DrawOutcome::AgentError(msg),
            latency: 1,
            cost: 0.0,
        };
        let Some(template) = &agent.command else {
            return error(format!("agent {} has no command", agent.agent_name));
        };
        let dir = self.work_dir.join(req.crash.crash_id.as_str());
        if let Err(e) = std::fs::create_dir_all(&dir) {
            return error(format!("work dir: {e}"));
        }
        let pov = dir.join("pov.bin");
        if let Err(e) = std::fs::write(&pov, &req.crash.pov_blob) {
            return error(format!("writing pov: {e}"));
        }
        let attempt = req.attempt.to_string();
        let command = substitute(
            template,
            &[
                ("crash_id", req.crash.crash_id.as_str()),
                ("project", &req.crash.project_id),
                ("harness", &req.crash.harness_id),
                ("sanitizer", &req.crash.sanitizer_signature),
                ("pov_file", &pov.to_string_lossy()),
                ("attempt", &attempt),
                ("work_dir", &dir.to_string_lossy()),
            ],
        );
        // Let the agent overrun slightly so the engine sees the timeout.
        let limit = Duration::from_millis(agent.timeout_ms + 1);
        let done = match run_with_timeout(&command, &dir, limit) {
            Ok(d) => d,
            Err(e) => return error(format!("spawn failed: {e}")),
        };
        let cost = reported_cost(&done.stderr);
        let latency = done.elapsed.max(1);
        let outcome = if done.timed_out {
            DrawOutcome::RepairFailure("timed out".into())
        } else {
            match done.code {
                Some(0) => match Patch::candidate(
                    done.stdout,
                    agent.agent_name.clone(),
                    req.crash.crash_id.clone(),
                    req.now + latency,
                    cost,
                    latency,
                ) {
                    Ok(patch) => match self.oracle.validate(&patch, &[req.crash], true) {
                        Ok(v) if v.plausible => DrawOutcome::Plausible(patch),
                        Ok(_) => DrawOutcome::RepairFailure("candidate failed validation".into()),
                        Err(e) => DrawOutcome::AgentError(format!("validation unavailable: {e}")),
                    },
                    Err(_) => DrawOutcome::RepairFailure("no diff produced".into()),
                },
                Some(1) => DrawOutcome::RepairFailure("agent gave up".into()),
                Some(c) => DrawOutcome::AgentError(format!("agent exited {c}")),
                None => DrawOutcome::AgentError("agent killed by signal".into()),
            }
        };
        AttemptDraw {
            outcome,
            latency,
            cost,
        }
    }
}

fn retarget(payload: EventPayload, id: TaskId) -> EventPayload {
    match payload {
        EventPayload::AgentStarted {
            lane, agent, attempt, ..
        } => EventPayload::AgentStarted {
            task_id: id,
            lane,
            agent,
            attempt,
        },
        EventPayload::AgentFinished {
            lane,
            agent,
            attempt,
            result,
            cost,
            latency,
            ..
        } => EventPayload::AgentFinished {
            task_id: id,
            lane,
            agent,
            attempt,
            result,
            cost,
            latency,
        },
        other => other,
    }
}

fn work_one(client: &reqwest::blocking::Client, server: &str, claim: Claim, oracle: &ResolutionOracle, work_dir: &Path) -> Result<()> {
    let id = claim.task_id;
    let started = now_ms();
    let mut crash: CrashReport = claim.crash;
    crash.arrival_time = 0;
    let runner = CommandRunner {
        oracle,
        work_dir: work_dir.to_owned(),
    };
    let (out, events) = run_task(crash, &claim.plan, runner, &claim.agents, &claim.quotas)?;
    for e in events {
        if let EngineOutput::Event { payload, .. } = e {
            let resp = client
                .post(format!("{server}/tasks/{}/events", id.0))
                .json(&retarget(payload, id))
                .send()?;
            if !resp.status().is_success() {
                bail!("coordinator rejected event for {id}: {}", resp.text().unwrap_or_default());
            }
        }
    }
    let run = out.run;
    // The engine ran on a clock starting at 0.
    let patch = out.patch.map(|mut p| {
        p.created_at += started;
        p
    });
    let result = TaskResult {
        patch,
        outcome: run.outcome.clone(),
        cancelled: false,
        total_cost: run.total_cost,
        started_at: started,
        ended_at: started + run.latency(),
    };
    let resp = client
        .post(format!("{server}/tasks/{}/result", id.0))
        .json(&result)
        .send()?;
    if !resp.status().is_success() {
        bail!("coordinator rejected result for {id}: {}", resp.text().unwrap_or_default());
    }
    println!("{id}: {:?} ({})", run.outcome.kind, run.outcome.detail);
    Ok(())
}

pub fn run(config_path: &Path, server: &str, max_tasks: Option<usize>, poll_secs: u64) -> Result<ExitCode> {
    let config = Config::load(config_path)?;
    let oracle = config.validation.build_oracle();
    let work_dir = config
        .log_path
        .parent()
        .or(config_path.parent())
        .unwrap_or(Path::new("."))
        .join("worker");
    let server = server.trim_end_matches('/');
    let client = reqwest::blocking::Client::builder()
        .timeout(None)
        .build()
        .context("building HTTP client")?;
    let mut done = 0;
    while max_tasks.is_none_or(|m| done < m) {
        let resp = client
            .post(format!("{server}/tasks/claim"))
            .send()
            .with_context(|| format!("claiming from {server}"))?;
        if resp.status() == reqwest::StatusCode::NO_CONTENT {
            thread::sleep(Duration::from_secs(poll_secs));
            continue;
        }
        if !resp.status().is_success() {
            bail!("claim failed: {}", resp.text().unwrap_or_default());
        }
        let claim: Claim = resp.json()?;
        work_one(&client, server, claim, &oracle, &work_dir)?;
        done += 1;
    }
    Ok(ExitCode::SUCCESS)
}
