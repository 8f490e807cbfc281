use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Millis;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderQuota {
    pub provider_id: String,
    pub max_concurrent: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_per_minute: Option<f64>,
}

impl ProviderQuota {
    pub fn new(provider_id: impl Into<String>, max_concurrent: u32) -> Self {
        Self {
            provider_id: provider_id.into(),
            max_concurrent,
            tokens_per_minute: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_concurrent == 0 {
            return Err(Error::InvalidConfig(format!(
                "provider {} needs max_concurrent >= 1",
                self.provider_id
            )));
        }
        if let Some(tpm) = self.tokens_per_minute {
            if !(tpm.is_finite() && tpm > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "provider {} has non-positive tokens_per_minute",
                    self.provider_id
                )));
            }
        }
        Ok(())
    }
}

/// Token bucket on the caller's clock. Starts full; capacity is one
/// minute's worth of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBucket {
    capacity: f64,
    tokens: f64,
    per_ms: f64,
    last: Millis,
}

impl TokenBucket {
    pub fn per_minute(tpm: f64) -> Self {
        Self {
            capacity: tpm,
            tokens: tpm,
            per_ms: tpm / 60_000.0,
            last: 0,
        }
    }

    fn refill(&mut self, now: Millis) {
        if now > self.last {
            self.tokens = (self.tokens + (now - self.last) as f64 * self.per_ms).min(self.capacity);
            self.last = now;
        }
    }

    /// Takes `n` tokens, or reports when enough will have accrued. Requests
    /// above capacity are clamped to capacity.
    pub fn try_take(&mut self, now: Millis, n: f64) -> std::result::Result<(), Millis> {
        self.refill(now);
        let n = n.min(self.capacity);
        if self.tokens + 1e-9 >= n {
            self.tokens -= n;
            Ok(())
        } else {
            let wait = ((n - self.tokens) / self.per_ms).ceil().max(1.0) as Millis;
            Err(now + wait)
        }
    }

    pub fn available(&mut self, now: Millis) -> f64 {
        self.refill(now);
        self.tokens
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Admission {
    Granted,
    /// Every concurrency slot is taken; retry after a release.
    Saturated,
    /// Not enough tokens until the given instant.
    WaitUntil(Millis),
}

#[derive(Clone, Debug)]
struct Gate {
    max: u32,
    active: u32,
    peak: u32,
    bucket: Option<TokenBucket>,
}

/// Counting semaphore per provider plus optional token buckets. Providers
/// without a quota are unlimited.
#[derive(Clone, Debug, Default)]
pub struct QuotaBook {
    gates: BTreeMap<String, Gate>,
    unlimited_active: BTreeMap<String, u32>,
    unlimited_peak: BTreeMap<String, u32>,
}

impl QuotaBook {
    pub fn new(quotas: &[ProviderQuota]) -> Result<Self> {
        let mut gates = BTreeMap::new();
        for q in quotas {
            q.validate()?;
            let gate = Gate {
                max: q.max_concurrent,
                active: 0,
                peak: 0,
                bucket: q.tokens_per_minute.map(TokenBucket::per_minute),
            };
            if gates.insert(q.provider_id.clone(), gate).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate quota for provider {}",
                    q.provider_id
                )));
            }
        }
        Ok(Self {
            gates,
            ..Default::default()
        })
    }

    pub fn try_acquire(&mut self, provider: &str, now: Millis, tokens: u64) -> Admission {
        let Some(gate) = self.gates.get_mut(provider) else {
            let n = self.unlimited_active.entry(provider.to_owned()).or_default();
            *n += 1;
            let peak = self.unlimited_peak.entry(provider.to_owned()).or_default();
            *peak = (*peak).max(*n);
            return Admission::Granted;
        };
        if gate.active >= gate.max {
            return Admission::Saturated;
        }
        if let Some(bucket) = &mut gate.bucket {
            if let Err(at) = bucket.try_take(now, tokens as f64) {
                return Admission::WaitUntil(at);
            }
        }
        gate.active += 1;
        gate.peak = gate.peak.max(gate.active);
        Admission::Granted
    }

    pub fn release(&mut self, provider: &str) {
        if let Some(gate) = self.gates.get_mut(provider) {
            gate.active = gate.active.saturating_sub(1);
        } else if let Some(n) = self.unlimited_active.get_mut(provider) {
            *n = n.saturating_sub(1);
        }
    }

    pub fn active(&self, provider: &str) -> u32 {
        self.gates
            .get(provider)
            .map(|g| g.active)
            .or_else(|| self.unlimited_active.get(provider).copied())
            .unwrap_or(0)
    }

    /// Highest concurrent attempt count seen per provider.
    pub fn peaks(&self) -> BTreeMap<String, u32> {
        let mut out: BTreeMap<String, u32> = self
            .gates
            .iter()
            .map(|(p, g)| (p.clone(), g.peak))
            .collect();
        out.extend(self.unlimited_peak.clone());
        out
    }

    pub fn cap(&self, provider: &str) -> Option<u32> {
        self.gates.get(provider).map(|g| g.max)
    }
}
