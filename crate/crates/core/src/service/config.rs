use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_unique_ranks, AgentProfile, Millis};
use crate::orchestrator::{LanePlan, ProviderQuota, Strategy, DEFAULT_TICK_MS};
use crate::validation::{
    CommandTemplates, EnvPool, EnvSpec, ExternalCommandBackend, ResolutionMatrix, ResolutionOracle,
    SimulatedBackend, StepTimeouts,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Overrides `listen_addr`.
pub const ENV_LISTEN_ADDR: &str = "CVR_LISTEN_ADDR";
/// Overrides `log_path`.
pub const ENV_LOG_PATH: &str = "CVR_LOG_PATH";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Simulated {
        #[serde(default)]
        matrix: ResolutionMatrix,
    },
    External {
        templates: CommandTemplates,
        #[serde(default)]
        timeouts: StepTimeouts,
        #[serde(default)]
        project_dirs: BTreeMap<String, PathBuf>,
        #[serde(default = "default_work_dir")]
        work_dir: PathBuf,
    },
}

fn default_work_dir() -> PathBuf {
    PathBuf::from("cvr-work")
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Simulated {
            matrix: ResolutionMatrix::default(),
        }
    }
}

fn default_pool_wait() -> Millis {
    30_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub env: EnvSpec,
    #[serde(default = "default_pool_wait")]
    pub pool_wait_ms: Millis,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::default(),
            env: EnvSpec::default(),
            pool_wait_ms: default_pool_wait(),
        }
    }
}

impl ValidationConfig {
    pub fn build_oracle(&self) -> ResolutionOracle {
        let pool = Arc::new(EnvPool::new(Duration::from_millis(self.pool_wait_ms)));
        match &self.backend {
            BackendConfig::Simulated { matrix } => ResolutionOracle::new(
                Arc::new(SimulatedBackend::new(matrix.clone())),
                pool,
                self.env.clone(),
            ),
            BackendConfig::External {
                templates,
                timeouts,
                project_dirs,
                work_dir,
            } => ResolutionOracle::new(
                Arc::new(ExternalCommandBackend {
                    templates: templates.clone(),
                    timeouts: *timeouts,
                    project_dirs: project_dirs.clone(),
                    work_dir: work_dir.clone(),
                }),
                pool,
                self.env.clone(),
            ),
        }
    }
}

fn default_lanes() -> usize {
    2
}

fn default_tick() -> Millis {
    DEFAULT_TICK_MS
}

fn default_log_path() -> PathBuf {
    PathBuf::from("cvr-events.jsonl")
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub schema_version: u32,
    pub agents: Vec<AgentProfile>,
    #[serde(default)]
    pub quotas: Vec<ProviderQuota>,
    #[serde(default = "default_lanes")]
    pub num_lanes: usize,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "default_tick")]
    pub tick_ms: Millis,
    #[serde(default)]
    pub validation: ValidationConfig,
    #[serde(default = "default_log_path")]
    pub log_path: PathBuf,
    /// fsync every log record before acknowledging.
    #[serde(default = "default_true")]
    pub sync_log: bool,
    #[serde(default = "default_listen")]
    pub listen_addr: String,
    /// Receives stored patches for review. The payload is the patch JSON.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub webhook_url: Option<String>,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Config = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file, resolves relative paths against its directory
    /// and applies environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Config = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.apply_env(|k| std::env::var(k).ok());
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.log_path);
        if let BackendConfig::External {
            project_dirs, work_dir, ..
        } = &mut self.validation.backend
        {
            fix(work_dir);
            project_dirs.values_mut().for_each(fix);
        }
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(addr) = lookup(ENV_LISTEN_ADDR) {
            self.listen_addr = addr;
        }
        if let Some(path) = lookup(ENV_LOG_PATH) {
            self.log_path = PathBuf::from(path);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            problems.push(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.agents.is_empty() {
            problems.push("at least one agent is required".into());
        }
        for a in &self.agents {
            if let Err(e) = a.validate() {
                problems.push(e.to_string());
            }
        }
        if let Err(e) = check_unique_ranks(&self.agents) {
            problems.push(e.to_string());
        }
        if self.num_lanes == 0 {
            problems.push("num_lanes must be at least 1".into());
        }
        if self.tick_ms == 0 {
            problems.push("tick_ms must be positive".into());
        }
        let providers: BTreeSet<&str> = self.agents.iter().map(|a| a.provider_id.as_str()).collect();
        let mut seen = BTreeSet::new();
        for q in &self.quotas {
            if let Err(e) = q.validate() {
                problems.push(e.to_string());
            }
            if !providers.contains(q.provider_id.as_str()) {
                problems.push(format!("quota for provider {} matches no agent", q.provider_id));
            }
            if !seen.insert(q.provider_id.as_str()) {
                problems.push(format!("duplicate quota for provider {}", q.provider_id));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn lane_plan(&self) -> Result<LanePlan> {
        LanePlan::for_strategy(self.strategy, &self.agents, self.num_lanes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "agents": [
            {"agent_name": "a1", "provider_id": "A", "preference_rank": 1},
            {"agent_name": "a2", "provider_id": "B", "preference_rank": 2}
        ],
        "quotas": [{"provider_id": "A", "max_concurrent": 1}]
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = Config::from_json(MINIMAL).unwrap();
        assert_eq!(c.num_lanes, 2);
        assert_eq!(c.strategy, Strategy::Fp2);
        assert_eq!(c.tick_ms, 100);
        assert_eq!(c.agents[0].timeout_ms, 3_600_000);
        assert!(matches!(c.validation.backend, BackendConfig::Simulated { .. }));
    }

    #[test]
    fn dangling_quota_and_duplicate_rank_rejected() {
        let bad = MINIMAL
            .replace("\"provider_id\": \"A\", \"max_concurrent\"", "\"provider_id\": \"Z\", \"max_concurrent\"")
            .replace("\"preference_rank\": 2", "\"preference_rank\": 1");
        let err = Config::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("matches no agent"), "{err}");
        assert!(err.contains("duplicate preference_rank"), "{err}");
    }

    #[test]
    fn env_overrides_and_relative_paths() {
        let mut c = Config::from_json(MINIMAL).unwrap();
        c.resolve_paths(Path::new("/etc/cvr"));
        assert_eq!(c.log_path, PathBuf::from("/etc/cvr/cvr-events.jsonl"));
        c.apply_env(|k| (k == ENV_LISTEN_ADDR).then(|| "0.0.0.0:9000".to_owned()));
        assert_eq!(c.listen_addr, "0.0.0.0:9000");
        assert_eq!(c.log_path, PathBuf::from("/etc/cvr/cvr-events.jsonl"));
    }
}
