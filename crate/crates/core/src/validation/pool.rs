use std::collections::HashMap;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvState {
    Idle,
    Leased,
    Broken,
}

/// A leased environment. Dropping it does not return the lease; call
/// [`EnvPool::release`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvHandle {
    pub env_id: String,
    pub fingerprint: String,
    pub project_id: String,
    pub variant: String,
}

/// Fingerprint of a build environment. Host identity and wall-clock time are
/// deliberately absent so the value is stable across workers.
pub fn env_fingerprint(project_id: &str, build_config: &str, toolchain_tag: &str) -> String {
    let mut h = Sha256::new();
    for part in [project_id, build_config, toolchain_tag] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

#[derive(Clone, Debug, Serialize)]
pub struct EnvRecord {
    pub handle: EnvHandle,
    pub state: EnvState,
}

#[derive(Debug, Default)]
struct Inner {
    by_fingerprint: HashMap<String, Vec<EnvRecord>>,
    fingerprint_of: HashMap<String, String>,
    count: usize,
}

impl Inner {
    fn record_mut(&mut self, env_id: &str) -> Option<&mut EnvRecord> {
        let fp = self.fingerprint_of.get(env_id)?;
        self.by_fingerprint
            .get_mut(fp)?
            .iter_mut()
            .find(|e| e.handle.env_id == env_id)
    }
}

/// Pool of reusable build/execution environments keyed by fingerprint.
#[derive(Debug)]
pub struct EnvPool {
    inner: Mutex<Inner>,
    released: Condvar,
    wait_budget: Duration,
}

impl Default for EnvPool {
    fn default() -> Self {
        Self::new(Duration::from_secs(30))
    }
}

impl EnvPool {
    pub fn new(wait_budget: Duration) -> Self {
        Self {
            inner: Mutex::new(Inner::default()),
            released: Condvar::new(),
            wait_budget,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("pool lock poisoned")
    }

    pub fn add_env(&self, project_id: &str, fingerprint: &str, variant: &str) -> String {
        let mut inner = self.lock();
        let env_id = format!("env-{}", inner.count);
        inner.count += 1;
        inner.fingerprint_of.insert(env_id.clone(), fingerprint.to_owned());
        inner
            .by_fingerprint
            .entry(fingerprint.to_owned())
            .or_default()
            .push(EnvRecord {
                handle: EnvHandle {
                    env_id: env_id.clone(),
                    fingerprint: fingerprint.to_owned(),
                    project_id: project_id.to_owned(),
                    variant: variant.to_owned(),
                },
                state: EnvState::Idle,
            });
        env_id
    }

    pub fn has_fingerprint(&self, fingerprint: &str) -> bool {
        self.lock().by_fingerprint.contains_key(fingerprint)
    }

    fn pick(inner: &mut Inner, fingerprint: &str, hint: Option<&str>) -> Option<EnvHandle> {
        let envs = inner.by_fingerprint.get_mut(fingerprint)?;
        let idle = |e: &EnvRecord| e.state == EnvState::Idle;
        let idx = envs
            .iter()
            .position(|e| idle(e) && hint.is_some_and(|h| e.handle.variant == h))
            .or_else(|| envs.iter().position(idle))?;
        envs[idx].state = EnvState::Leased;
        Some(envs[idx].handle.clone())
    }

    fn exhausted(inner: &Inner, fingerprint: &str) -> bool {
        !inner
            .by_fingerprint
            .get(fingerprint)
            .is_some_and(|envs| envs.iter().any(|e| e.state != EnvState::Broken))
    }

    /// Leases an idle environment without waiting.
    pub fn try_acquire(&self, fingerprint: &str, variant_hint: Option<&str>) -> Result<EnvHandle> {
        let mut inner = self.lock();
        Self::pick(&mut inner, fingerprint, variant_hint).ok_or_else(|| Error::PoolExhausted {
            fingerprint: fingerprint.to_owned(),
        })
    }

    /// Leases an idle environment, waiting up to the pool's budget for a
    /// release. Fails at once when every matching environment is broken.
    pub fn acquire(&self, fingerprint: &str, variant_hint: Option<&str>) -> Result<EnvHandle> {
        let mut inner = self.lock();
        if let Some(h) = Self::pick(&mut inner, fingerprint, variant_hint) {
            return Ok(h);
        }
        // The clock is read only when we have to wait.
        let deadline = Instant::now() + self.wait_budget;
        loop {
            if let Some(h) = Self::pick(&mut inner, fingerprint, variant_hint) {
                return Ok(h);
            }
            let now = Instant::now();
            if Self::exhausted(&inner, fingerprint) || now >= deadline {
                return Err(Error::PoolExhausted {
                    fingerprint: fingerprint.to_owned(),
                });
            }
            inner = self
                .released
                .wait_timeout(inner, deadline - now)
                .expect("pool lock poisoned")
                .0;
        }
    }

    /// Returns a lease. A broken environment is never leased again.
    pub fn release(&self, handle: &EnvHandle, broken: bool) -> Result<()> {
        let mut inner = self.lock();
        let rec = inner
            .record_mut(&handle.env_id)
            .ok_or_else(|| Error::UnknownEnv(handle.env_id.clone()))?;
        if rec.state != EnvState::Leased {
            return Err(Error::InvalidInput(format!("{} is not leased", handle.env_id)));
        }
        rec.state = if broken { EnvState::Broken } else { EnvState::Idle };
        drop(inner);
        self.released.notify_all();
        Ok(())
    }

    /// Every environment, in creation order.
    pub fn snapshot(&self) -> Vec<EnvRecord> {
        let inner = self.lock();
        let mut all: Vec<EnvRecord> = inner.by_fingerprint.values().flatten().cloned().collect();
        all.sort_by_key(|e| e.handle.env_id[4..].parse::<usize>().unwrap_or(usize::MAX));
        all
    }
}
