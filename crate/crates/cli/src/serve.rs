//! HTTP front end for the coordinator.
//!
//! Every request that mutates state goes through one `Mutex<Service>`, and
//! the event log is written (and synced) before the handler answers, so an
//! acknowledged request survives a crash of the process.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use cvr_core::dedup::{DispatchDecision, QueueEntry};
use cvr_core::event::EventPayload;
use cvr_core::model::{AgentProfile, CrashId, CrashReport, Millis, OutcomeClass, Patch, PatchId, ScanMode, TaskId};
use cvr_core::orchestrator::{LanePlan, ProviderQuota};
use cvr_core::service::{CloseReport, Config, Coordinator, EventLog, TaskRecord, TaskResult};
use cvr_core::validation::ResolutionOracle;
use cvr_core::Error;
use serde::{Deserialize, Serialize};

pub fn now_ms() -> Millis {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as Millis)
        .unwrap_or(0)
}

pub struct Service {
    coord: Coordinator<EventLog>,
    oracle: ResolutionOracle,
    plan: LanePlan,
    agents: Vec<AgentProfile>,
    quotas: Vec<ProviderQuota>,
    tick_ms: Millis,
    webhook_url: Option<String>,
    /// Tasks handed to a worker since this process started. Not persisted: after
    /// a restart every open task can be claimed again.
    claimed: BTreeSet<TaskId>,
    cancel_requested: BTreeSet<TaskId>,
}

/// Crash submission. `crash_id` is optional; when present it must match the
/// content.
#[derive(Debug, Deserialize)]
pub struct CrashSubmission {
    #[serde(default)]
    pub crash_id: Option<CrashId>,
    pub project_id: String,
    pub harness_id: String,
    /// Base64.
    pub pov_blob: String,
    pub sanitizer_signature: String,
    #[serde(default)]
    pub mode: ScanMode,
    #[serde(default)]
    pub arrival_time: Option<Millis>,
}

#[derive(Debug, Serialize)]
pub struct CrashAck {
    #[serde(flatten)]
    pub decision: DispatchDecision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_id: Option<TaskId>,
    pub crash_id: CrashId,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Claim {
    pub task_id: TaskId,
    pub crash: CrashReport,
    pub plan: LanePlan,
    pub agents: Vec<AgentProfile>,
    pub quotas: Vec<ProviderQuota>,
    pub tick_ms: Millis,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskView {
    #[serde(flatten)]
    pub record: TaskRecord,
    pub claimed: bool,
    pub cancel_requested: bool,
}

#[derive(Debug, Serialize)]
struct PatchesView<'a> {
    patches: Vec<&'a Patch>,
    superseded: usize,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidInput(_)
            | Error::InvalidEvent(_)
            | Error::InvalidConfig(_)
            | Error::InvalidScenario(_)
            | Error::Json(_) => StatusCode::BAD_REQUEST,
            Error::PoolExhausted { .. } | Error::UnknownEnv(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError(StatusCode::BAD_REQUEST, r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn not_found(what: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("{what} not found"))
}

impl Service {
    pub fn open(config: &Config) -> anyhow::Result<Self> {
        let (log, rec) = EventLog::open(&config.log_path, config.sync_log)
            .with_context(|| format!("opening event log {}", config.log_path.display()))?;
        if rec.dropped_tail {
            tracing::warn!("dropped a truncated final record from {}", config.log_path.display());
        }
        tracing::info!(seq = rec.state.last_seq, "recovered coordinator state");
        Ok(Self {
            coord: Coordinator::resume(rec.state, log),
            oracle: config.validation.build_oracle(),
            plan: config.lane_plan()?,
            agents: config.agents.clone(),
            quotas: config.quotas.clone(),
            tick_ms: config.tick_ms,
            webhook_url: config.webhook_url.clone(),
            claimed: BTreeSet::new(),
            cancel_requested: BTreeSet::new(),
        })
    }

    fn submit_crash(&mut self, sub: CrashSubmission) -> Result<CrashAck, ApiError> {
        let pov = STANDARD
            .decode(sub.pov_blob.as_bytes())
            .map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("pov_blob is not base64: {e}")))?;
        let now = now_ms();
        self.coord.advance_clock(now);
        let crash = CrashReport::new(
            sub.project_id,
            sub.harness_id,
            pov,
            sub.sanitizer_signature,
            sub.mode,
            sub.arrival_time.unwrap_or(now),
        )?;
        if let Some(claimed) = &sub.crash_id {
            if claimed != &crash.crash_id {
                return Err(ApiError(
                    StatusCode::BAD_REQUEST,
                    format!("crash_id {claimed} does not match content ({})", crash.crash_id),
                ));
            }
        }
        let crash_id = crash.crash_id.clone();
        // A resubmitted crash keeps its original report.
        let crash = self.coord.dedup().crash(&crash_id).cloned().unwrap_or(crash);
        let decision = self.coord.receive_crash(crash, &self.oracle)?;
        let task_id = match decision {
            DispatchDecision::DuplicateOf(_) => None,
            DispatchDecision::Enqueue => match self.coord.tasks().open_task_for(&crash_id) {
                Some(t) => Some(t),
                None => Some(self.coord.dispatch(&crash_id)?),
            },
        };
        Ok(CrashAck {
            decision,
            task_id,
            crash_id,
        })
    }

    fn claim(&mut self) -> Option<Claim> {
        let record = self
            .coord
            .tasks()
            .open_tasks()
            .filter(|t| !self.claimed.contains(&t.task_id))
            .min_by_key(|t| t.task_id)?;
        let task_id = record.task_id;
        let crash = self.coord.dedup().crash(&record.crash_id)?.clone();
        self.claimed.insert(task_id);
        Some(Claim {
            task_id,
            crash,
            plan: self.plan.clone(),
            agents: self.agents.clone(),
            quotas: self.quotas.clone(),
            tick_ms: self.tick_ms,
        })
    }

    fn record(&mut self, task_id: TaskId, payload: EventPayload) -> Result<(), ApiError> {
        let matches = match &payload {
            EventPayload::AgentStarted { task_id: t, .. } | EventPayload::AgentFinished { task_id: t, .. } => {
                *t == task_id
            }
            _ => false,
        };
        if !matches {
            return Err(ApiError(
                StatusCode::BAD_REQUEST,
                "only agent_started / agent_finished events for this task are accepted".into(),
            ));
        }
        self.coord.advance_clock(now_ms());
        Ok(self.coord.record(payload)?)
    }

    fn close(&mut self, task_id: TaskId, result: TaskResult) -> Result<CloseReport, ApiError> {
        self.coord.advance_clock(now_ms());
        let report = self.coord.close_task(task_id, result, &self.oracle)?;
        self.claimed.remove(&task_id);
        self.cancel_requested.remove(&task_id);
        for &t in &report.to_cancel {
            if self.claimed.contains(&t) {
                // A worker holds it; it sees the flag on GET /tasks/{id}.
                self.cancel_requested.insert(t);
            } else {
                self.close_unclaimed(t)?;
            }
        }
        Ok(report)
    }

    /// Closes a task nobody has started, because its crash is already fixed.
    fn close_unclaimed(&mut self, task_id: TaskId) -> Result<(), ApiError> {
        let Some(started_at) = self.coord.tasks().tasks.get(&task_id).map(|t| t.dispatched_at) else {
            return Ok(());
        };
        let now = now_ms().max(started_at);
        self.coord.close_task(
            task_id,
            TaskResult {
                patch: None,
                outcome: OutcomeClass::failure("cancelled: crash resolved by another task's patch"),
                cancelled: true,
                total_cost: 0.0,
                started_at,
                ended_at: now,
            },
            &self.oracle,
        )?;
        Ok(())
    }

    fn task(&self, task_id: TaskId) -> Option<TaskView> {
        let record = self.coord.tasks().tasks.get(&task_id)?.clone();
        Some(TaskView {
            record,
            claimed: self.claimed.contains(&task_id),
            cancel_requested: self.cancel_requested.contains(&task_id),
        })
    }

    fn submit_patch(&mut self, patch_id: &PatchId) -> Result<Patch, ApiError> {
        self.coord.advance_clock(now_ms());
        self.coord.submit(patch_id)?;
        self.coord
            .dedup()
            .store()
            .get(patch_id)
            .cloned()
            .ok_or_else(|| not_found(format!("patch {patch_id}")))
    }
}

type Shared = Arc<Mutex<Service>>;

/// Runs `f` on the service off the async executor; validation can block.
async fn with_service<T: Send + 'static>(
    shared: Shared,
    f: impl FnOnce(&mut Service) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(move || {
        let mut guard = shared
            .lock()
            .map_err(|_| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "coordinator lock poisoned".into()))?;
        f(&mut guard)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn post_crash(
    State(s): State<Shared>,
    body: Result<Json<CrashSubmission>, JsonRejection>,
) -> ApiResult<CrashAck> {
    let Json(sub) = body?;
    Ok(Json(with_service(s, move |svc| svc.submit_crash(sub)).await?))
}

async fn post_claim(State(s): State<Shared>) -> Response {
    match with_service(s, |svc| Ok(svc.claim())).await {
        Ok(Some(claim)) => Json(claim).into_response(),
        Ok(None) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => e.into_response(),
    }
}

async fn post_task_event(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<u64>,
    body: Result<Json<EventPayload>, JsonRejection>,
) -> Result<StatusCode, ApiError> {
    let Json(payload) = body?;
    with_service(s, move |svc| svc.record(TaskId(id), payload)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn post_task_result(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<u64>,
    body: Result<Json<TaskResult>, JsonRejection>,
) -> ApiResult<CloseReport> {
    let Json(result) = body?;
    Ok(Json(with_service(s, move |svc| svc.close(TaskId(id), result)).await?))
}

async fn get_task(State(s): State<Shared>, UrlPath(id): UrlPath<u64>) -> ApiResult<TaskView> {
    let view = with_service(s, move |svc| svc.task(TaskId(id)).ok_or_else(|| not_found(TaskId(id)))).await?;
    Ok(Json(view))
}

async fn get_patches(State(s): State<Shared>) -> ApiResult<serde_json::Value> {
    let v = with_service(s, |svc| {
        let store = svc.coord.dedup().store();
        let view = PatchesView {
            patches: store.patches().values().collect(),
            superseded: store.superseded().len(),
        };
        serde_json::to_value(view).map_err(|e| ApiError::from(Error::from(e)))
    })
    .await?;
    Ok(Json(v))
}

async fn get_queue(State(s): State<Shared>) -> ApiResult<Vec<QueueEntry>> {
    let q = with_service(s, |svc| Ok(svc.coord.dedup().queue().entries().to_vec())).await?;
    Ok(Json(q))
}

async fn get_state(State(s): State<Shared>) -> ApiResult<serde_json::Value> {
    let v = with_service(s, |svc| {
        serde_json::to_value(svc.coord.view()).map_err(|e| ApiError::from(Error::from(e)))
    })
    .await?;
    Ok(Json(v))
}

async fn post_submit(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Patch> {
    let (patch, webhook) = with_service(s, move |svc| {
        let patch = svc.submit_patch(&PatchId::new(id))?;
        Ok((patch, svc.webhook_url.clone()))
    })
    .await?;
    if let Some(url) = webhook {
        let body = patch.clone();
        tokio::task::spawn_blocking(move || deliver(&url, &body));
    }
    Ok(Json(patch))
}

/// Best-effort delivery to the configured tracker webhook. The submission is
/// already durable in the log; delivery failures are only logged.
fn deliver(url: &str, patch: &Patch) {
    let client = reqwest::blocking::Client::new();
    match client.post(url).json(patch).send() {
        Ok(r) if r.status().is_success() => tracing::info!(patch = %patch.patch_id, "delivered to webhook"),
        Ok(r) => tracing::warn!(patch = %patch.patch_id, status = %r.status(), "webhook rejected patch"),
        Err(e) => tracing::warn!(patch = %patch.patch_id, "webhook delivery failed: {e}"),
    }
}

async fn healthz(State(s): State<Shared>) -> ApiResult<serde_json::Value> {
    let seq = with_service(s, |svc| Ok(svc.coord.last_seq())).await?;
    Ok(Json(serde_json::json!({ "status": "ok", "last_seq": seq })))
}

pub fn router(service: Service) -> Router {
    Router::new()
        .route("/crashes", post(post_crash))
        .route("/tasks/claim", post(post_claim))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/events", post(post_task_event))
        .route("/tasks/{id}/result", post(post_task_result))
        .route("/patches", get(get_patches))
        .route("/patches/{id}/submit", post(post_submit))
        .route("/queue", get(get_queue))
        .route("/state", get(get_state))
        .route("/healthz", get(healthz))
        .with_state(Arc::new(Mutex::new(service)))
}

pub fn run(config_path: &Path) -> anyhow::Result<ExitCode> {
    let config = Config::load(config_path)?;
    let service = Service::open(&config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&config.listen_addr)
            .await
            .with_context(|| format!("binding {}", config.listen_addr))?;
        let addr = listener.local_addr()?;
        println!("listening on {addr}");
        tracing::info!("coordinator listening on {addr}");
        axum::serve(listener, router(service))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(ExitCode::SUCCESS)
    })
}
