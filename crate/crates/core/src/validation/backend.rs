use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::RwLock;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::pool::EnvHandle;
use crate::error::{Error, Result};
use crate::model::{CrashId, CrashReport, Millis, Patch, PatchId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepResult {
    /// Build succeeded, PoV no longer crashes, or tests passed.
    Ok,
    /// Build failed, PoV still crashes, or tests failed.
    Negative(String),
    /// Infrastructure fault unrelated to the patch.
    Fault(String),
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepReport {
    pub result: StepResult,
    pub elapsed: Millis,
}

impl StepReport {
    pub fn new(result: StepResult, elapsed: Millis) -> Self {
        Self { result, elapsed }
    }
}

/// One build/reproduce/test implementation. Implementations must be
/// deterministic in (diff text, crash, environment fingerprint) for results
/// other than `Fault` and `Timeout`; the validation cache relies on it.
pub trait ValidationBackend: Send + Sync {
    fn build(&self, patch: &Patch, env: &EnvHandle) -> StepReport;

    fn reproduce(&self, patch: &Patch, crash: &CrashReport, env: &EnvHandle) -> StepReport;

    /// `None` when the project has no functional tests.
    fn test(&self, patch: &Patch, env: &EnvHandle) -> Option<StepReport>;
}

/// Scripted resolution behaviour for the simulated backend.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResolutionMatrix {
    /// Crashes whose PoV no longer reproduces on the patched build.
    #[serde(default)]
    pub resolves: BTreeMap<PatchId, BTreeSet<CrashId>>,
    #[serde(default)]
    pub build_failures: BTreeSet<PatchId>,
    #[serde(default)]
    pub test_failures: BTreeSet<PatchId>,
    /// Probes that time out.
    #[serde(default)]
    pub timeouts: BTreeSet<(PatchId, CrashId)>,
    /// Environments whose every step fails with an infrastructure fault.
    #[serde(default)]
    pub faulty_envs: BTreeSet<String>,
    #[serde(default)]
    pub projects_without_tests: BTreeSet<String>,
    /// Virtual duration of each step.
    #[serde(default)]
    pub step_ms: Millis,
}

impl ResolutionMatrix {
    pub fn resolves(&self, patch: &PatchId, crash: &CrashId) -> bool {
        self.resolves.get(patch).is_some_and(|s| s.contains(crash))
    }
}

/// Backend that reads every answer off a [`ResolutionMatrix`]. Rows are keyed
/// by patch id, so callers must give distinct diff texts to patches with
/// distinct rows.
#[derive(Debug, Default)]
pub struct SimulatedBackend {
    matrix: RwLock<ResolutionMatrix>,
}

impl SimulatedBackend {
    pub fn new(matrix: ResolutionMatrix) -> Self {
        Self {
            matrix: RwLock::new(matrix),
        }
    }

    pub fn update(&self, f: impl FnOnce(&mut ResolutionMatrix)) {
        f(&mut self.matrix.write().expect("matrix lock poisoned"));
    }

    pub fn matrix(&self) -> ResolutionMatrix {
        self.matrix.read().expect("matrix lock poisoned").clone()
    }

    fn with<T>(&self, f: impl FnOnce(&ResolutionMatrix) -> T) -> T {
        f(&self.matrix.read().expect("matrix lock poisoned"))
    }
}

impl ValidationBackend for SimulatedBackend {
    fn build(&self, patch: &Patch, env: &EnvHandle) -> StepReport {
        self.with(|m| {
            let r = if m.faulty_envs.contains(&env.env_id) {
                StepResult::Fault(format!("environment {} unavailable", env.env_id))
            } else if m.build_failures.contains(&patch.patch_id) {
                StepResult::Negative("patched build failed".into())
            } else {
                StepResult::Ok
            };
            StepReport::new(r, m.step_ms)
        })
    }

    fn reproduce(&self, patch: &Patch, crash: &CrashReport, env: &EnvHandle) -> StepReport {
        self.with(|m| {
            let r = if m.faulty_envs.contains(&env.env_id) {
                StepResult::Fault(format!("environment {} unavailable", env.env_id))
            } else if m
                .timeouts
                .contains(&(patch.patch_id.clone(), crash.crash_id.clone()))
            {
                StepResult::Timeout
            } else if m.resolves(&patch.patch_id, &crash.crash_id) {
                StepResult::Ok
            } else {
                StepResult::Negative("sanitizer crash reproduced".into())
            };
            StepReport::new(r, m.step_ms)
        })
    }

    fn test(&self, patch: &Patch, env: &EnvHandle) -> Option<StepReport> {
        self.with(|m| {
            if m.projects_without_tests.contains(&env.project_id) {
                return None;
            }
            let r = if m.faulty_envs.contains(&env.env_id) {
                StepResult::Fault(format!("environment {} unavailable", env.env_id))
            } else if m.test_failures.contains(&patch.patch_id) {
                StepResult::Negative("functional tests failed".into())
            } else {
                StepResult::Ok
            };
            Some(StepReport::new(r, m.step_ms))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandTemplates {
    pub build: String,
    pub reproduce: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTimeouts {
    pub build_ms: Millis,
    pub reproduce_ms: Millis,
    pub test_ms: Millis,
}

impl Default for StepTimeouts {
    fn default() -> Self {
        Self {
            build_ms: 600_000,
            reproduce_ms: 60_000,
            test_ms: 1_200_000,
        }
    }
}

/// Runs shell command templates against a project checkout.
///
/// Templates may use `{project_dir}`, `{diff_file}` and `{pov_file}`. Exit
/// status 0 is a positive result, 1 a negative one, anything else (including
/// death by signal) an infrastructure fault.
#[derive(Clone, Debug)]
pub struct ExternalCommandBackend {
    pub templates: CommandTemplates,
    pub timeouts: StepTimeouts,
    pub project_dirs: BTreeMap<String, PathBuf>,
    pub work_dir: PathBuf,
}

impl ExternalCommandBackend {
    fn project_dir(&self, env: &EnvHandle) -> std::result::Result<&Path, StepReport> {
        self.project_dirs
            .get(&env.project_id)
            .map(PathBuf::as_path)
            .ok_or_else(|| {
                StepReport::new(
                    StepResult::Fault(format!("no project_dir for {}", env.project_id)),
                    0,
                )
            })
    }

    fn materialize(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        fs::create_dir_all(&self.work_dir).map_err(|e| Error::io(&self.work_dir, e))?;
        let path = self.work_dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn run(&self, template: &str, vars: &[(&str, &Path)], timeout_ms: Millis) -> StepReport {
        let mut cmd = template.to_owned();
        for (name, value) in vars {
            cmd = cmd.replace(&format!("{{{name}}}"), &value.display().to_string());
        }
        run_shell(&cmd, Duration::from_millis(timeout_ms))
    }

    fn diff_file(&self, patch: &Patch) -> std::result::Result<PathBuf, StepReport> {
        self.materialize(&format!("{}.diff", patch.patch_id), patch.diff_text.as_bytes())
            .map_err(|e| StepReport::new(StepResult::Fault(e.to_string()), 0))
    }
}

/// Runs `sh -c command`, killing it after `timeout`.
pub fn run_shell(command: &str, timeout: Duration) -> StepReport {
    let started = Instant::now();
    let child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn();
    let mut child = match child {
        Ok(c) => c,
        Err(e) => return StepReport::new(StepResult::Fault(format!("spawn failed: {e}")), 0),
    };
    let elapsed = |s: Instant| s.elapsed().as_millis() as Millis;
    loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                let r = match status.code() {
                    Some(0) => StepResult::Ok,
                    Some(1) => StepResult::Negative(format!("`{command}` exited 1")),
                    Some(code) => StepResult::Fault(format!("`{command}` exited {code}")),
                    None => StepResult::Fault(format!("`{command}` killed by signal")),
                };
                return StepReport::new(r, elapsed(started));
            }
            Ok(None) if started.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return StepReport::new(StepResult::Timeout, elapsed(started));
            }
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(e) => return StepReport::new(StepResult::Fault(format!("wait failed: {e}")), 0),
        }
    }
}

impl ValidationBackend for ExternalCommandBackend {
    fn build(&self, patch: &Patch, env: &EnvHandle) -> StepReport {
        let dir = match self.project_dir(env) {
            Ok(d) => d,
            Err(r) => return r,
        };
        let diff = match self.diff_file(patch) {
            Ok(d) => d,
            Err(r) => return r,
        };
        self.run(
            &self.templates.build,
            &[("project_dir", dir), ("diff_file", &diff)],
            self.timeouts.build_ms,
        )
    }

    fn reproduce(&self, patch: &Patch, crash: &CrashReport, env: &EnvHandle) -> StepReport {
        let dir = match self.project_dir(env) {
            Ok(d) => d,
            Err(r) => return r,
        };
        let diff = match self.diff_file(patch) {
            Ok(d) => d,
            Err(r) => return r,
        };
        let pov = match self.materialize(&format!("{}.pov", crash.crash_id), &crash.pov_blob) {
            Ok(p) => p,
            Err(e) => return StepReport::new(StepResult::Fault(e.to_string()), 0),
        };
        self.run(
            &self.templates.reproduce,
            &[("project_dir", dir), ("diff_file", &diff), ("pov_file", &pov)],
            self.timeouts.reproduce_ms,
        )
    }

    fn test(&self, patch: &Patch, env: &EnvHandle) -> Option<StepReport> {
        let template = self.templates.test.as_ref()?;
        let dir = match self.project_dir(env) {
            Ok(d) => d,
            Err(r) => return Some(r),
        };
        let diff = match self.diff_file(patch) {
            Ok(d) => d,
            Err(r) => return Some(r),
        };
        Some(self.run(
            template,
            &[("project_dir", dir), ("diff_file", &diff)],
            self.timeouts.test_ms,
        ))
    }
}
