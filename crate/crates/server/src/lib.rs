//! HTTP service for task submission, workflow runs, profiling and reports.
//!
//! Handlers validate requests and read snapshot state; every mutation goes
//! through one scheduler loop that owns the queue and the event log.

mod api;
pub mod config;
mod engine;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use hetsched_core::catalog::{split_tool_ref, Catalog, ParamValue};
use hetsched_core::cluster::ResourceVector;
use hetsched_core::profiler::ProfileStore;
use hetsched_core::tasks::{JobSpec, TaskEvent, TaskIdGenerator, TaskRecord, TaskState};
use hetsched_core::workflow::{parse_workflow, plan, RunRecord, RunTracker};
use hetsched_core::Error;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

pub use api::ROUTES;
pub use config::{ExecutionMode, ServiceConfig};
pub use engine::View;
use engine::{Command, Engine};

pub const SERVICE_NAME: &str = "hetsched";
pub const SERVICE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Error body returned by every failing endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("HTTP {status}: {message}")]
pub struct ApiError {
    pub status: u16,
    pub message: String,
    /// Per-field validation messages.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fields: BTreeMap<String, String>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status: status.as_u16(), message: message.into(), fields: BTreeMap::new() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn fields(message: &str, fields: BTreeMap<String, String>) -> Self {
        Self { fields, ..Self::bad_request(message) }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) | Error::UnknownTask(_) | Error::UnresolvedTool(_) => StatusCode::NOT_FOUND,
            Error::TaskNotComplete { .. } | Error::IllegalTransition { .. } => StatusCode::CONFLICT,
            Error::Io(_) | Error::RunnerUnavailable(_) | Error::Spawn { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        let mut err = ApiError::new(status, e.to_string());
        match e {
            Error::TypeMismatch { input, message } => {
                err.fields.insert(input, message);
            }
            Error::MissingRequiredInput(input) => {
                err.fields.insert(input, "required input is missing".into());
            }
            Error::UnknownInput(input) => {
                err.fields.insert(input, "unknown input".into());
            }
            _ => {}
        }
        err
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    /// `id` or `id@version`.
    pub tool_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default)]
    pub bindings: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource_request: Option<ResourceVector>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    /// Workflow document (YAML or JSON text).
    pub workflow: String,
    #[serde(default)]
    pub bindings: serde_json::Map<String, serde_json::Value>,
}

pub(crate) struct Shared {
    pub config: Arc<ServiceConfig>,
    pub catalog: Arc<Catalog>,
    pub profiles: Arc<ProfileStore>,
    pub view: Arc<RwLock<View>>,
    pub ids: Arc<TaskIdGenerator>,
    tx: mpsc::UnboundedSender<Command>,
}

/// A started service: the scheduler loop is running; [`Service::router`]
/// exposes it over HTTP.
#[derive(Clone)]
pub struct Service {
    shared: Arc<Shared>,
}

impl Service {
    /// Opens the catalog, profiles and event log under `config.state_dir`,
    /// recovers task state, and spawns the scheduler loop. Must be called
    /// inside a tokio runtime.
    pub async fn start(config: ServiceConfig) -> hetsched_core::Result<Self> {
        config.cluster.validate()?;
        std::fs::create_dir_all(&config.work_dir)?;
        let config = Arc::new(config);
        let catalog = Arc::new(Catalog::open(&config.state_dir)?);
        let profiles = Arc::new(ProfileStore::open(&config.state_dir)?);
        let view = Arc::new(RwLock::new(View::default()));
        let ids = Arc::new(TaskIdGenerator::new());
        let (tx, rx) = mpsc::unbounded_channel();
        let engine = Engine::start(config.clone(), catalog.clone(), profiles.clone(), ids.clone(), view.clone(), tx.clone())?;
        tokio::spawn(engine.run(rx));
        Ok(Self { shared: Arc::new(Shared { config, catalog, profiles, view, ids, tx }) })
    }

    pub fn router(&self) -> Router {
        api::router(self.shared.clone())
    }

    /// Binds `addr` and serves in a background task.
    pub async fn spawn(&self, addr: SocketAddr) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let local = listener.local_addr()?;
        let app = self.router();
        let handle = tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                tracing::error!("server stopped: {e}");
            }
        });
        Ok((local, handle))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.shared.config
    }

    pub fn catalog(&self) -> &Catalog {
        &self.shared.catalog
    }

    pub fn profiles(&self) -> &ProfileStore {
        &self.shared.profiles
    }

    pub async fn create_task(&self, request: TaskRequest) -> ApiResult<String> {
        self.shared.create_task(request).await
    }

    pub async fn cancel_task(&self, id: &str) -> ApiResult<TaskState> {
        self.shared.cancel_task(id).await
    }

    pub async fn create_run(&self, request: RunRequest) -> ApiResult<String> {
        self.shared.create_run(request).await
    }

    pub fn task(&self, id: &str) -> Option<TaskRecord> {
        self.shared.view.read().expect("view lock").tasks.get(id).cloned()
    }

    pub fn run(&self, id: &str) -> Option<RunRecord> {
        self.shared.view.read().expect("view lock").runs.get(id).cloned()
    }

    pub fn events(&self) -> Vec<TaskEvent> {
        self.shared.view.read().expect("view lock").stats.events().to_vec()
    }
}

fn coerce_all(
    inputs: &[hetsched_core::catalog::InputParameter],
    raw: &serde_json::Map<String, serde_json::Value>,
) -> ApiResult<hetsched_core::catalog::Bindings> {
    let mut fields = BTreeMap::new();
    let mut out = hetsched_core::catalog::Bindings::new();
    for (k, v) in raw {
        match inputs.iter().find(|i| &i.id == k) {
            None => {
                fields.insert(k.clone(), "unknown input".to_string());
            }
            Some(input) => match ParamValue::coerce(&input.param_type, v) {
                Ok(p) => {
                    out.insert(k.clone(), p);
                }
                Err(m) => {
                    fields.insert(k.clone(), m);
                }
            },
        }
    }
    if fields.is_empty() {
        Ok(out)
    } else {
        Err(ApiError::fields("invalid workflow bindings", fields))
    }
}

impl Shared {
    async fn send<T>(&self, make: impl FnOnce(oneshot::Sender<hetsched_core::Result<T>>) -> Command) -> ApiResult<T> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(make(reply))
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "scheduler loop has stopped"))?;
        let result = rx.await.map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "scheduler loop has stopped"))?;
        result.map_err(ApiError::from)
    }

    pub(crate) fn validate_task(&self, request: &TaskRequest) -> ApiResult<JobSpec> {
        let (id, inline_version) = split_tool_ref(&request.tool_id);
        let version = request.version.as_deref().or(inline_version);
        let record = self
            .catalog
            .get(id, version)
            .or_else(|| {
                let _ = self.catalog.refresh();
                self.catalog.get(id, version)
            })
            .ok_or_else(|| ApiError::not_found(format!("unknown tool `{}`", request.tool_id)))?;
        let tool = record.descriptor;
        let bindings = tool.coerce_bindings(&request.bindings).map_err(|f| ApiError::fields("invalid bindings", f))?;
        tool.resolve_bindings(&bindings)?;
        if let Some(r) = &request.resource_request {
            if r.cpu_millis() == 0 && r.memory_mb == 0 {
                return Err(ApiError::bad_request("resource_request must ask for some CPU or memory"));
            }
        }
        let mut job = JobSpec::new(tool.id.clone(), bindings);
        job.version = Some(tool.version.clone());
        job.resource_request = request.resource_request.clone();
        job.tags = request.tags.clone();
        Ok(job)
    }

    pub(crate) async fn create_task(&self, request: TaskRequest) -> ApiResult<String> {
        let job = self.validate_task(&request)?;
        self.send(|reply| Command::CreateTask { job, reply }).await
    }

    pub(crate) async fn cancel_task(&self, id: &str) -> ApiResult<TaskState> {
        let id = id.to_string();
        self.send(|reply| Command::Cancel { id, reply }).await
    }

    pub(crate) async fn create_run(&self, request: RunRequest) -> ApiResult<String> {
        let workflow = parse_workflow(&request.workflow)?;
        let resolver = |r: &str| self.catalog.resolve(r);
        let dag = plan(&workflow, &resolver)?;
        let bindings = coerce_all(&workflow.inputs, &request.bindings)?;
        let tracker = RunTracker::new(self.ids.next_id(), workflow, dag, &bindings)?;
        let tracker = Box::new(tracker);
        self.send(|reply| Command::CreateRun { tracker, reply }).await
    }
}
