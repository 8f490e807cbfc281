use std::collections::{BTreeSet, HashMap};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ValidationVerdict;
use crate::model::{CrashId, Patch};

/// Which validation steps a verdict covers. Part of the cache key, so a
/// reproduce-only probe never answers for a full validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Reproduce,
    ReproduceAndTest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey([u8; 32]);

impl CacheKey {
    pub fn new<'a>(
        patch: &Patch,
        crashes: impl IntoIterator<Item = &'a CrashId>,
        env_fingerprint: &str,
        kind: CheckKind,
    ) -> Self {
        let crashes: BTreeSet<&CrashId> = crashes.into_iter().collect();
        let mut h = Sha256::new();
        h.update(b"cvr.cache.v1");
        h.update(patch.content_digest());
        h.update((crashes.len() as u64).to_le_bytes());
        for c in crashes {
            h.update((c.as_str().len() as u64).to_le_bytes());
            h.update(c.as_str().as_bytes());
        }
        h.update((env_fingerprint.len() as u64).to_le_bytes());
        h.update(env_fingerprint.as_bytes());
        h.update([kind as u8]);
        let mut out = [0u8; 32];
        out.copy_from_slice(&h.finalize());
        CacheKey(out)
    }

    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }
}

/// Write-once verdict cache shared by every validation on a worker.
#[derive(Debug, Default)]
pub struct ValidationCache {
    entries: RwLock<HashMap<CacheKey, ValidationVerdict>>,
}

impl ValidationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &CacheKey) -> Option<ValidationVerdict> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .get(key)
            .cloned()
    }

    /// Inserts unless the key is present. Verdicts for one key are equal by
    /// the backend determinism contract, so either writer's value is fine.
    pub fn insert(&self, key: CacheKey, verdict: ValidationVerdict) {
        self.entries
            .write()
            .expect("cache lock poisoned")
            .entry(key)
            .or_insert(verdict);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
