//! Domain types shared by the coordinator, the dedup engine, the
//! orchestrator and the simulator.
//!
//! Everything here is a plain value object. Identity rules live next to the
//! types they identify: [`crash_identity`] for crashes and
//! [`Patch::derive_id`] for patches.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(
    /// Content hash of a crash report, see [`crash_identity`].
    CrashId
);
string_id!(PatchId);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// Virtual or wall-clock milliseconds on the coordinator's clock.
pub type Millis = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    #[default]
    Full,
    Delta,
}

fn sha256_fields(tag: &str, fields: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    for field in fields {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field);
    }
    let mut out = [0u8; 32];
    out.copy_from_slice(&hasher.finalize());
    out
}

/// Derives the identity of a crash report.
///
/// The harness is part of the identity, so identical PoV bytes replayed
/// through two harnesses are two crashes. Fields are length-prefixed before
/// hashing so that moving bytes between adjacent fields changes the id.
pub fn crash_identity(
    project_id: &str,
    harness_id: &str,
    pov_blob: &[u8],
    sanitizer_signature: &str,
) -> Result<CrashId> {
    if pov_blob.is_empty() {
        return Err(Error::InvalidInput("pov_blob must be non-empty".into()));
    }
    let digest = sha256_fields(
        "cvr.crash.v1",
        &[
            project_id.as_bytes(),
            harness_id.as_bytes(),
            pov_blob,
            sanitizer_signature.as_bytes(),
        ],
    );
    Ok(CrashId(hex::encode(digest)))
}

mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashReport {
    pub crash_id: CrashId,
    pub project_id: String,
    pub harness_id: String,
    #[serde(with = "b64")]
    pub pov_blob: Vec<u8>,
    pub sanitizer_signature: String,
    #[serde(default)]
    pub mode: ScanMode,
    #[serde(default)]
    pub arrival_time: Millis,
}

impl CrashReport {
    pub fn new(
        project_id: impl Into<String>,
        harness_id: impl Into<String>,
        pov_blob: impl Into<Vec<u8>>,
        sanitizer_signature: impl Into<String>,
        mode: ScanMode,
        arrival_time: Millis,
    ) -> Result<Self> {
        let project_id = project_id.into();
        let harness_id = harness_id.into();
        let pov_blob = pov_blob.into();
        let sanitizer_signature = sanitizer_signature.into();
        let crash_id = crash_identity(&project_id, &harness_id, &pov_blob, &sanitizer_signature)?;
        Ok(Self {
            crash_id,
            project_id,
            harness_id,
            pov_blob,
            sanitizer_signature,
            mode,
            arrival_time,
        })
    }

    /// Checks that `crash_id` matches the content. Reports arriving over the
    /// wire are re-identified rather than trusted.
    pub fn verify_identity(&self) -> Result<()> {
        let expected = crash_identity(
            &self.project_id,
            &self.harness_id,
            &self.pov_blob,
            &self.sanitizer_signature,
        )?;
        if expected != self.crash_id {
            return Err(Error::InvalidInput(format!(
                "crash_id {} does not match report content (expected {expected})",
                self.crash_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchStatus {
    Candidate,
    Stored,
    Submitted,
    Superseded,
}

impl PatchStatus {
    pub fn can_advance_to(self, next: PatchStatus) -> bool {
        use PatchStatus::*;
        matches!(
            (self, next),
            (Candidate, Stored) | (Stored, Submitted) | (Stored, Superseded) | (Submitted, Superseded)
        )
    }

    pub fn is_live(self) -> bool {
        matches!(self, PatchStatus::Stored | PatchStatus::Submitted)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub patch_id: PatchId,
    pub diff_text: String,
    pub origin_agent: String,
    /// The crash the generating task was dispatched for.
    pub origin_crash: CrashId,
    pub covered_povs: BTreeSet<CrashId>,
    pub status: PatchStatus,
    pub created_at: Millis,
    pub cost: f64,
    pub latency: Millis,
}

impl Patch {
    /// Builds a candidate patch that covers its originating crash.
    pub fn candidate(
        diff_text: impl Into<String>,
        origin_agent: impl Into<String>,
        origin_crash: CrashId,
        created_at: Millis,
        cost: f64,
        latency: Millis,
    ) -> Result<Self> {
        let diff_text = diff_text.into();
        let origin_agent = origin_agent.into();
        validate_unified_diff(&diff_text)?;
        if !(cost.is_finite() && cost >= 0.0) {
            return Err(Error::InvalidInput(format!("patch cost must be >= 0, got {cost}")));
        }
        let patch_id = Self::derive_id(&origin_crash, &origin_agent, &diff_text);
        Ok(Self {
            patch_id,
            diff_text,
            origin_agent,
            covered_povs: BTreeSet::from([origin_crash.clone()]),
            origin_crash,
            status: PatchStatus::Candidate,
            created_at,
            cost,
            latency,
        })
    }

    pub fn derive_id(origin_crash: &CrashId, origin_agent: &str, diff_text: &str) -> PatchId {
        let digest = sha256_fields(
            "cvr.patch.v1",
            &[
                origin_crash.as_str().as_bytes(),
                origin_agent.as_bytes(),
                diff_text.as_bytes(),
            ],
        );
        PatchId(format!("p-{}", hex::encode(&digest[..8])))
    }

    pub fn advance(&mut self, next: PatchStatus) -> Result<()> {
        if !self.status.can_advance_to(next) {
            return Err(Error::InvalidInput(format!(
                "patch {} cannot move from {:?} to {:?}",
                self.patch_id, self.status, next
            )));
        }
        if next.is_live() && self.covered_povs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "patch {} has no covered PoVs",
                self.patch_id
            )));
        }
        self.status = next;
        Ok(())
    }

    /// Digest of the diff text alone. Two patches with the same diff validate
    /// identically, so this is what validation caches key on.
    pub fn content_digest(&self) -> [u8; 32] {
        sha256_fields("cvr.diff.v1", &[self.diff_text.as_bytes()])
    }
}

/// Accepts text containing at least one well-formed `@@ -a[,b] +c[,d] @@`
/// hunk header. Hunk bodies are not interpreted.
pub fn validate_unified_diff(text: &str) -> Result<()> {
    if text.lines().any(is_hunk_header) {
        Ok(())
    } else {
        Err(Error::InvalidInput("diff has no unified hunk header".into()))
    }
}

fn is_hunk_header(line: &str) -> bool {
    let Some(rest) = line.strip_prefix("@@ -") else {
        return false;
    };
    let Some((ranges, _)) = rest.split_once(" @@") else {
        return false;
    };
    let Some((old, new)) = ranges.split_once(" +") else {
        return false;
    };
    fn range_ok(r: &str) -> bool {
        let mut parts = r.splitn(2, ',');
        let start_ok = parts
            .next()
            .is_some_and(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()));
        let len_ok = parts
            .next()
            .is_none_or(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()));
        start_ok && len_ok
    }
    range_ok(old) && range_ok(new)
}

/// Sampling distribution for simulated latency and cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dist {
    Constant { value: f64 },
    /// Log-normal parameterised by its median (`exp(mu)`) and log-space sigma.
    LogNormal { median: f64, sigma: f64 },
    Uniform { low: f64, high: f64 },
}

impl Dist {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        let valid = match *self {
            Dist::Constant { value } => ok(value),
            Dist::LogNormal { median, sigma } => ok(median) && median > 0.0 && ok(sigma),
            Dist::Uniform { low, high } => ok(low) && ok(high) && low <= high,
        };
        if valid {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid distribution {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Constant { value } => value,
            Dist::LogNormal { median, sigma } => {
                if sigma == 0.0 {
                    median
                } else {
                    LogNormal::new(median.ln(), sigma)
                        .expect("validated lognormal parameters")
                        .sample(rng)
                }
            }
            Dist::Uniform { low, high } => {
                if low == high {
                    low
                } else {
                    Uniform::new(low, high)
                        .expect("validated uniform bounds")
                        .sample(rng)
                }
            }
        }
    }

    pub fn median(&self) -> f64 {
        match *self {
            Dist::Constant { value } => value,
            Dist::LogNormal { median, .. } => median,
            Dist::Uniform { low, high } => (low + high) / 2.0,
        }
    }
}

/// Stochastic behaviour of a simulated agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimBehavior {
    pub success_prob: f64,
    /// Milliseconds per attempt.
    pub latency_dist: Dist,
    /// Currency units per attempt.
    pub cost_dist: Dist,
    #[serde(default)]
    pub error_prob: f64,
    #[serde(default)]
    pub plausible_but_wrong_prob: f64,
}

impl SimBehavior {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| p.is_finite() && (0.0..=1.0).contains(&p);
        if !(prob(self.success_prob) && prob(self.error_prob) && prob(self.plausible_but_wrong_prob)) {
            return Err(Error::InvalidInput("probabilities must lie in [0, 1]".into()));
        }
        if self.success_prob + self.error_prob > 1.0 + 1e-12 {
            return Err(Error::InvalidInput(
                "success_prob + error_prob must not exceed 1".into(),
            ));
        }
        self.latency_dist.validate()?;
        self.cost_dist.validate()
    }
}

fn default_timeout() -> Millis {
    3_600_000
}

fn default_attempts() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_name: String,
    pub provider_id: String,
    /// Lower is preferred.
    pub preference_rank: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<SimBehavior>,
    #[serde(default = "default_timeout")]
    pub timeout_ms: Millis,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    /// Estimated token draw per attempt, charged against the provider's
    /// tokens-per-minute bucket.
    #[serde(default)]
    pub est_tokens: u64,
    /// Shell command for real agents; see the worker documentation for the
    /// substitution variables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
}

impl AgentProfile {
    pub fn new(name: impl Into<String>, provider: impl Into<String>, rank: u32) -> Self {
        Self {
            agent_name: name.into(),
            provider_id: provider.into(),
            preference_rank: rank,
            behavior: None,
            timeout_ms: default_timeout(),
            max_attempts: 1,
            est_tokens: 0,
            command: None,
        }
    }

    pub fn with_behavior(mut self, behavior: SimBehavior) -> Self {
        self.behavior = Some(behavior);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.agent_name.is_empty() || self.provider_id.is_empty() {
            return Err(Error::InvalidInput("agent name and provider are required".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidInput(format!(
                "agent {} needs max_attempts >= 1",
                self.agent_name
            )));
        }
        if self.timeout_ms == 0 {
            return Err(Error::InvalidInput(format!(
                "agent {} needs a positive timeout",
                self.agent_name
            )));
        }
        if let Some(b) = &self.behavior {
            b.validate()
                .map_err(|e| Error::InvalidInput(format!("agent {}: {e}", self.agent_name)))?;
        }
        Ok(())
    }
}

/// Checks that preference ranks form a total order over one configuration.
pub fn check_unique_ranks(agents: &[AgentProfile]) -> Result<()> {
    let mut seen = BTreeSet::new();
    let mut names = BTreeSet::new();
    for a in agents {
        if !seen.insert(a.preference_rank) {
            return Err(Error::InvalidConfig(format!(
                "duplicate preference_rank {} (agent {})",
                a.preference_rank, a.agent_name
            )));
        }
        if !names.insert(a.agent_name.as_str()) {
            return Err(Error::InvalidConfig(format!("duplicate agent name {}", a.agent_name)));
        }
    }
    Ok(())
}

/// Merges agent lists from several configurations into one total order.
/// Conflicting ranks are broken by agent name, then ranks are renumbered
/// densely from 1.
pub fn merge_agent_configs(configs: &[Vec<AgentProfile>]) -> Vec<AgentProfile> {
    let mut all: Vec<AgentProfile> = configs.iter().flatten().cloned().collect();
    all.sort_by(|a, b| {
        a.preference_rank
            .cmp(&b.preference_rank)
            .then_with(|| a.agent_name.cmp(&b.agent_name))
    });
    all.dedup_by(|b, a| a.agent_name == b.agent_name);
    for (i, a) in all.iter_mut().enumerate() {
        a.preference_rank = i as u32 + 1;
    }
    all
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeKind {
    Success,
    Failure,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeClass {
    pub kind: OutcomeKind,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_id: Option<PatchId>,
}

impl OutcomeClass {
    pub fn success(patch_id: PatchId) -> Self {
        Self {
            kind: OutcomeKind::Success,
            detail: format!("plausible patch {patch_id}"),
            patch_id: Some(patch_id),
        }
    }

    pub fn failure(reason: impl Into<String>) -> Self {
        Self {
            kind: OutcomeKind::Failure,
            detail: reason.into(),
            patch_id: None,
        }
    }

    pub fn error(reason: impl Into<String>) -> Self {
        Self {
            kind: OutcomeKind::Error,
            detail: reason.into(),
            patch_id: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crash_identity_is_deterministic() {
        let a = crash_identity("libxml2", "fuzz_xml", b"<a>", "heap-overflow").unwrap();
        let b = crash_identity("libxml2", "fuzz_xml", b"<a>", "heap-overflow").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.as_str().len(), 64);
    }

    #[test]
    fn crash_identity_changes_with_one_byte() {
        let a = crash_identity("libxml2", "fuzz_xml", b"<a>", "sig").unwrap();
        let b = crash_identity("libxml2", "fuzz_xml", b"<b>", "sig").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn harness_is_part_of_identity() {
        let a = crash_identity("p", "h1", b"x", "s").unwrap();
        let b = crash_identity("p", "h2", b"x", "s").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn field_boundaries_matter() {
        let a = crash_identity("ab", "c", b"x", "s").unwrap();
        let b = crash_identity("a", "bc", b"x", "s").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn empty_pov_rejected() {
        assert!(matches!(
            crash_identity("p", "h", b"", "s"),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn tampered_report_fails_identity_check() {
        let mut r = CrashReport::new("p", "h", b"pov".to_vec(), "s", ScanMode::Full, 0).unwrap();
        r.verify_identity().unwrap();
        r.pov_blob.push(b'!');
        assert!(r.verify_identity().is_err());
    }

    #[test]
    fn hunk_headers() {
        assert!(is_hunk_header("@@ -1,3 +1,4 @@"));
        assert!(is_hunk_header("@@ -10 +10 @@ fn main()"));
        assert!(!is_hunk_header("@@ -a,3 +1,4 @@"));
        assert!(!is_hunk_header("@@ -1,3 +1,4"));
        assert!(!is_hunk_header("--- a/x.c"));
        assert!(validate_unified_diff("--- a/x\n+++ b/x\n@@ -1 +1 @@\n-a\n+b\n").is_ok());
        assert!(validate_unified_diff("just text").is_err());
    }

    #[test]
    fn status_transitions_are_monotone() {
        use PatchStatus::*;
        assert!(Candidate.can_advance_to(Stored));
        assert!(Stored.can_advance_to(Submitted));
        assert!(Stored.can_advance_to(Superseded));
        assert!(!Stored.can_advance_to(Candidate));
        assert!(!Superseded.can_advance_to(Stored));
        assert!(!Candidate.can_advance_to(Submitted));
    }

    #[test]
    fn live_patch_needs_coverage() {
        let mut p = Patch::candidate("@@ -1 +1 @@\n", "a", CrashId::new("c"), 0, 0.0, 0).unwrap();
        p.covered_povs.clear();
        assert!(p.advance(PatchStatus::Stored).is_err());
    }

    #[test]
    fn behavior_probabilities_checked() {
        let b = SimBehavior {
            success_prob: 0.7,
            latency_dist: Dist::Constant { value: 1.0 },
            cost_dist: Dist::Constant { value: 1.0 },
            error_prob: 0.4,
            plausible_but_wrong_prob: 0.0,
        };
        assert!(b.validate().is_err());
    }

    #[test]
    fn duplicate_ranks_rejected_and_merge_renumbers() {
        let a = vec![AgentProfile::new("a", "x", 1), AgentProfile::new("b", "y", 2)];
        let b = vec![AgentProfile::new("c", "x", 1)];
        let mut both = a.clone();
        both.extend(b.clone());
        assert!(check_unique_ranks(&both).is_err());
        let merged = merge_agent_configs(&[a, b]);
        let names: Vec<_> = merged.iter().map(|a| a.agent_name.as_str()).collect();
        assert_eq!(names, ["a", "c", "b"]);
        check_unique_ranks(&merged).unwrap();
    }
}
