//! Patch validation: build, PoV reproduction and functional tests behind a
//! pluggable backend, fronted by a verdict cache and an environment pool.

mod backend;
mod cache;
mod pool;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use backend::{
    run_shell, CommandTemplates, ExternalCommandBackend, ResolutionMatrix, SimulatedBackend,
    StepReport, StepResult, StepTimeouts, ValidationBackend,
};
pub use cache::{CacheKey, CheckKind, ValidationCache};
pub use pool::{env_fingerprint, EnvHandle, EnvPool, EnvRecord, EnvState};

use crate::error::Result;
use crate::model::{CrashId, CrashReport, Millis, Patch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Resolved,
    StillCrashes,
    /// The probe could not be decided (timeout, infrastructure fault).
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub build_ok: bool,
    pub pov_results: BTreeMap<CrashId, Resolution>,
    pub tests_ok: Option<bool>,
    /// Set when `tests_ok` is `Some(true)` only because the project has no
    /// functional tests.
    #[serde(default)]
    pub tests_missing: bool,
    pub plausible: bool,
    pub elapsed: Millis,
    #[serde(default)]
    pub infra_fault: bool,
}

impl ValidationVerdict {
    /// plausible ⇒ build_ok ∧ tests_ok = true ∧ every PoV resolved.
    pub fn is_consistent(&self) -> bool {
        !self.plausible
            || (self.build_ok
                && self.tests_ok == Some(true)
                && self.pov_results.values().all(|r| *r == Resolution::Resolved))
    }
}

/// Anything that can answer "does this patch stop this crash".
pub trait Resolver {
    fn resolve(&self, patch: &Patch, crash: &CrashReport) -> Resolution;
}

impl<F> Resolver for F
where
    F: Fn(&Patch, &CrashReport) -> Resolution,
{
    fn resolve(&self, patch: &Patch, crash: &CrashReport) -> Resolution {
        self(patch, crash)
    }
}

/// Runs the three-step pipeline and caches deterministic verdicts.
pub struct Validator {
    backend: Arc<dyn ValidationBackend>,
    cache: ValidationCache,
    invocations: AtomicU64,
}

impl std::fmt::Debug for Validator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Validator")
            .field("cache_entries", &self.cache.len())
            .field("invocations", &self.backend_invocations())
            .finish()
    }
}

impl Validator {
    pub fn new(backend: Arc<dyn ValidationBackend>) -> Self {
        Self {
            backend,
            cache: ValidationCache::new(),
            invocations: AtomicU64::new(0),
        }
    }

    /// Number of cache misses that reached the backend.
    pub fn backend_invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> &ValidationCache {
        &self.cache
    }

    pub fn validate(
        &self,
        patch: &Patch,
        crashes: &[&CrashReport],
        tests: bool,
        env: &EnvHandle,
    ) -> ValidationVerdict {
        let kind = if tests {
            CheckKind::ReproduceAndTest
        } else {
            CheckKind::Reproduce
        };
        let key = CacheKey::new(patch, crashes.iter().map(|c| &c.crash_id), &env.fingerprint, kind);
        if let Some(hit) = self.cache.get(&key) {
            return hit;
        }
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let verdict = self.run_pipeline(patch, crashes, tests, env);
        let undecided = verdict.infra_fault
            || verdict
                .pov_results
                .values()
                .any(|r| *r == Resolution::Inconclusive);
        // Faults and timeouts are not deterministic results.
        if !undecided {
            self.cache.insert(key, verdict.clone());
        }
        verdict
    }

    fn run_pipeline(
        &self,
        patch: &Patch,
        crashes: &[&CrashReport],
        tests: bool,
        env: &EnvHandle,
    ) -> ValidationVerdict {
        let mut verdict = ValidationVerdict {
            build_ok: false,
            pov_results: crashes
                .iter()
                .map(|c| (c.crash_id.clone(), Resolution::Inconclusive))
                .collect(),
            tests_ok: None,
            tests_missing: false,
            plausible: false,
            elapsed: 0,
            infra_fault: false,
        };

        let build = self.backend.build(patch, env);
        verdict.elapsed += build.elapsed;
        match build.result {
            StepResult::Ok => verdict.build_ok = true,
            StepResult::Negative(_) | StepResult::Timeout => return verdict,
            StepResult::Fault(_) => {
                verdict.infra_fault = true;
                return verdict;
            }
        }

        for crash in crashes {
            let step = self.backend.reproduce(patch, crash, env);
            verdict.elapsed += step.elapsed;
            let r = match step.result {
                StepResult::Ok => Resolution::Resolved,
                StepResult::Negative(_) => Resolution::StillCrashes,
                StepResult::Timeout => Resolution::Inconclusive,
                StepResult::Fault(_) => {
                    verdict.infra_fault = true;
                    Resolution::Inconclusive
                }
            };
            verdict.pov_results.insert(crash.crash_id.clone(), r);
        }

        let all_resolved = verdict
            .pov_results
            .values()
            .all(|r| *r == Resolution::Resolved);
        if tests && all_resolved && !verdict.infra_fault {
            match self.backend.test(patch, env) {
                None => {
                    verdict.tests_ok = Some(true);
                    verdict.tests_missing = true;
                }
                Some(step) => {
                    verdict.elapsed += step.elapsed;
                    match step.result {
                        StepResult::Ok => verdict.tests_ok = Some(true),
                        StepResult::Negative(_) => verdict.tests_ok = Some(false),
                        StepResult::Timeout => verdict.tests_ok = Some(false),
                        StepResult::Fault(_) => verdict.infra_fault = true,
                    }
                }
            }
        }
        verdict.plausible = tests
            && verdict.build_ok
            && all_resolved
            && !crashes.is_empty()
            && verdict.tests_ok == Some(true);
        debug_assert!(verdict.is_consistent());
        verdict
    }
}

/// Build configuration used to fingerprint environments per project.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub build_config: String,
    pub toolchain_tag: String,
    /// Environments provisioned per project on first use.
    pub per_project: usize,
    pub variants: Vec<String>,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            build_config: "default".into(),
            toolchain_tag: "default".into(),
            per_project: 2,
            variants: vec!["default".into()],
        }
    }
}

/// The resolution oracle used by deduplication and by workers: a validator
/// plus the environment pool it leases from.
#[derive(Debug)]
pub struct ResolutionOracle {
    validator: Validator,
    pool: Arc<EnvPool>,
    env_spec: EnvSpec,
}

impl ResolutionOracle {
    pub fn new(backend: Arc<dyn ValidationBackend>, pool: Arc<EnvPool>, env_spec: EnvSpec) -> Self {
        Self {
            validator: Validator::new(backend),
            pool,
            env_spec,
        }
    }

    pub fn simulated(backend: Arc<SimulatedBackend>) -> Self {
        Self::new(backend, Arc::new(EnvPool::default()), EnvSpec::default())
    }

    pub fn validator(&self) -> &Validator {
        &self.validator
    }

    pub fn pool(&self) -> &EnvPool {
        &self.pool
    }

    pub fn fingerprint_for(&self, project_id: &str) -> String {
        env_fingerprint(
            project_id,
            &self.env_spec.build_config,
            &self.env_spec.toolchain_tag,
        )
    }

    fn lease(&self, project_id: &str) -> Result<EnvHandle> {
        let fp = self.fingerprint_for(project_id);
        if !self.pool.has_fingerprint(&fp) {
            let variants = if self.env_spec.variants.is_empty() {
                vec!["default".to_owned()]
            } else {
                self.env_spec.variants.clone()
            };
            for i in 0..self.env_spec.per_project.max(1) {
                self.pool.add_env(project_id, &fp, &variants[i % variants.len()]);
            }
        }
        self.pool.acquire(&fp, None)
    }

    /// Full validation of a candidate against the given crashes, leasing an
    /// environment for the duration. An infrastructure fault marks the
    /// environment broken.
    pub fn validate(&self, patch: &Patch, crashes: &[&CrashReport], tests: bool) -> Result<ValidationVerdict> {
        let project = crashes
            .first()
            .map(|c| c.project_id.as_str())
            .unwrap_or_default();
        let env = self.lease(project)?;
        let verdict = self.validator.validate(patch, crashes, tests, &env);
        self.pool.release(&env, verdict.infra_fault)?;
        Ok(verdict)
    }

    /// Reproduce-only probe. Never fails: any fault folds into
    /// [`Resolution::Inconclusive`].
    pub fn resolved_by_patch(&self, patch: &Patch, crash: &CrashReport) -> Resolution {
        match self.validate(patch, &[crash], false) {
            Ok(v) => v
                .pov_results
                .get(&crash.crash_id)
                .copied()
                .unwrap_or(Resolution::Inconclusive),
            Err(e) => {
                tracing::warn!(patch = %patch.patch_id, crash = %crash.crash_id, "probe failed: {e}");
                Resolution::Inconclusive
            }
        }
    }
}

impl Resolver for ResolutionOracle {
    fn resolve(&self, patch: &Patch, crash: &CrashReport) -> Resolution {
        self.resolved_by_patch(patch, crash)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScanMode;
    use std::collections::BTreeSet;

    fn crash(tag: &str) -> CrashReport {
        CrashReport::new("proj", "fuzz", tag.as_bytes().to_vec(), "sig", ScanMode::Full, 0).unwrap()
    }

    fn patch(diff_tag: &str, origin: &CrashReport) -> Patch {
        Patch::candidate(
            format!("--- a/f.c\n+++ b/f.c\n@@ -1 +1 @@\n-{diff_tag}\n+fixed\n"),
            "agent",
            origin.crash_id.clone(),
            0,
            1.0,
            10,
        )
        .unwrap()
    }

    fn env(fp: &str) -> EnvHandle {
        EnvHandle {
            env_id: format!("env-{fp}"),
            fingerprint: fp.into(),
            project_id: "proj".into(),
            variant: "default".into(),
        }
    }

    #[test]
    fn identical_key_hits_backend_once() {
        let c1 = crash("c1");
        let p = patch("x", &c1);
        let backend = Arc::new(SimulatedBackend::new(ResolutionMatrix {
            resolves: [(p.patch_id.clone(), BTreeSet::from([c1.crash_id.clone()]))].into(),
            ..Default::default()
        }));
        let v = Validator::new(backend);
        let e = env("fp1");
        let first = v.validate(&p, &[&c1], true, &e);
        let second = v.validate(&p, &[&c1], true, &e);
        assert_eq!(first, second);
        assert!(first.plausible);
        assert_eq!(v.backend_invocations(), 1);
    }

    #[test]
    fn distinct_fingerprints_are_distinct_keys() {
        let c1 = crash("c1");
        let p = patch("x", &c1);
        let v = Validator::new(Arc::new(SimulatedBackend::default()));
        v.validate(&p, &[&c1], true, &env("fp1"));
        v.validate(&p, &[&c1], true, &env("fp2"));
        assert_eq!(v.backend_invocations(), 2);
        assert_eq!(v.cache().len(), 2);
    }

    #[test]
    fn mixed_matrix_is_not_plausible() {
        let c1 = crash("c1");
        let c2 = crash("c2");
        let p = patch("x", &c1);
        let backend = Arc::new(SimulatedBackend::new(ResolutionMatrix {
            resolves: [(p.patch_id.clone(), BTreeSet::from([c1.crash_id.clone()]))].into(),
            ..Default::default()
        }));
        let v = Validator::new(backend).validate(&p, &[&c1, &c2], true, &env("fp"));
        assert!(!v.plausible);
        assert_eq!(v.pov_results[&c1.crash_id], Resolution::Resolved);
        assert_eq!(v.pov_results[&c2.crash_id], Resolution::StillCrashes);
        assert!(v.is_consistent());
    }

    #[test]
    fn missing_tests_are_flagged() {
        let c1 = crash("c1");
        let p = patch("x", &c1);
        let backend = Arc::new(SimulatedBackend::new(ResolutionMatrix {
            resolves: [(p.patch_id.clone(), BTreeSet::from([c1.crash_id.clone()]))].into(),
            projects_without_tests: BTreeSet::from(["proj".to_owned()]),
            ..Default::default()
        }));
        let v = Validator::new(backend).validate(&p, &[&c1], true, &env("fp"));
        assert!(v.plausible);
        assert_eq!(v.tests_ok, Some(true));
        assert!(v.tests_missing);
    }

    #[test]
    fn failing_tests_block_plausibility() {
        let c1 = crash("c1");
        let p = patch("x", &c1);
        let backend = Arc::new(SimulatedBackend::new(ResolutionMatrix {
            resolves: [(p.patch_id.clone(), BTreeSet::from([c1.crash_id.clone()]))].into(),
            test_failures: BTreeSet::from([p.patch_id.clone()]),
            ..Default::default()
        }));
        let v = Validator::new(backend).validate(&p, &[&c1], true, &env("fp"));
        assert_eq!(v.tests_ok, Some(false));
        assert!(!v.plausible);
    }

    #[test]
    fn timeouts_are_inconclusive_and_uncached() {
        let c1 = crash("c1");
        let p = patch("x", &c1);
        let backend = Arc::new(SimulatedBackend::new(ResolutionMatrix {
            resolves: [(p.patch_id.clone(), BTreeSet::from([c1.crash_id.clone()]))].into(),
            timeouts: BTreeSet::from([(p.patch_id.clone(), c1.crash_id.clone())]),
            ..Default::default()
        }));
        let v = Validator::new(backend);
        let verdict = v.validate(&p, &[&c1], true, &env("fp"));
        assert_eq!(verdict.pov_results[&c1.crash_id], Resolution::Inconclusive);
        assert!(!verdict.plausible);
        v.validate(&p, &[&c1], true, &env("fp"));
        assert_eq!(v.backend_invocations(), 2);
        assert!(v.cache().is_empty());
    }

    #[test]
    fn infra_fault_breaks_env() {
        let c1 = crash("c1");
        let p = patch("x", &c1);
        let backend = Arc::new(SimulatedBackend::new(ResolutionMatrix {
            resolves: [(p.patch_id.clone(), BTreeSet::from([c1.crash_id.clone()]))].into(),
            faulty_envs: BTreeSet::from(["env-0".to_owned()]),
            ..Default::default()
        }));
        let oracle = ResolutionOracle::simulated(backend);
        assert_eq!(oracle.resolved_by_patch(&p, &c1), Resolution::Inconclusive);
        let states: Vec<_> = oracle.pool().snapshot().iter().map(|e| e.state).collect();
        assert_eq!(states, [EnvState::Broken, EnvState::Idle]);
        // The next probe lands on the healthy environment.
        assert_eq!(oracle.resolved_by_patch(&p, &c1), Resolution::Resolved);
    }

    #[test]
    fn scripted_oracle_resolution() {
        let c1 = crash("c1");
        let p = patch("x", &c1);
        let backend = Arc::new(SimulatedBackend::default());
        backend.update(|m| {
            m.resolves
                .insert(p.patch_id.clone(), BTreeSet::from([c1.crash_id.clone()]));
        });
        let oracle = ResolutionOracle::simulated(backend);
        assert_eq!(oracle.resolved_by_patch(&p, &c1), Resolution::Resolved);
        assert_eq!(
            oracle.resolved_by_patch(&p, &crash("other")),
            Resolution::StillCrashes
        );
    }
}
