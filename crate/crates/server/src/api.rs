use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use hetsched_core::catalog::{parse_tool, render_form_schema, split_tool_ref, ToolDescriptor, Visibility};
use hetsched_core::executor::{LocalRunner, Runner, SimulatedRunner};
use hetsched_core::monitoring::JobFilter;
use hetsched_core::packager::{build_crate, validate_crate, write_crate, PackageOptions, METADATA_FILE};
use hetsched_core::profiler::{profile_tool, ExecutionProfile, ProfilingOptions, ProfilingRequest};
use hetsched_core::tasks::{is_valid_task_id, TaskState};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::engine::now_seconds;
use crate::{ApiError, ApiResult, ExecutionMode, RunRequest, Shared, TaskRequest, SERVICE_NAME, SERVICE_VERSION};

type AppState = State<Arc<Shared>>;

/// Every route the service answers, as `(method, path)`.
pub const ROUTES: &[(&str, &str)] = &[
    ("GET", "/v1/service-info"),
    ("POST", "/v1/tasks"),
    ("GET", "/v1/tasks"),
    ("GET", "/v1/tasks/{id}"),
    ("POST", "/v1/tasks/{id}:cancel"),
    ("POST", "/v1/tasks/{id}:package"),
    ("GET", "/v1/tasks/{id}/crate"),
    ("POST", "/v1/runs"),
    ("GET", "/v1/runs/{id}"),
    ("GET", "/v1/reports/jobs"),
    ("GET", "/v1/reports/load"),
    ("GET", "/v1/tools"),
    ("POST", "/v1/tools"),
    ("GET", "/v1/tools/{id}"),
    ("GET", "/v1/tools/{id}/form"),
    ("GET", "/v1/tools/{id}/suggest"),
    ("GET", "/v1/tools/{id}/profile"),
    ("POST", "/v1/tools/{id}/profile"),
];

pub(crate) fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/v1/service-info", get(service_info))
        .route("/v1/tasks", get(list_tasks).post(create_task))
        .route("/v1/tasks/{id}", get(get_task).post(task_action))
        .route("/v1/tasks/{id}/crate", get(get_crate))
        .route("/v1/runs", axum::routing::post(create_run))
        .route("/v1/runs/{id}", get(get_run))
        .route("/v1/reports/jobs", get(jobs_report))
        .route("/v1/reports/load", get(load_report))
        .route("/v1/tools", get(list_tools).post(register_tool))
        .route("/v1/tools/{id}", get(get_tool))
        .route("/v1/tools/{id}/form", get(get_form))
        .route("/v1/tools/{id}/suggest", get(suggest))
        .route("/v1/tools/{id}/profile", get(get_profile).post(run_profiling))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(shared)
}

async fn service_info(State(s): AppState) -> Json<Value> {
    let endpoints: Vec<String> = ROUTES.iter().map(|(m, p)| format!("{m} {p}")).collect();
    let classes: Vec<Value> = s
        .config
        .cluster
        .classes_by_cost()
        .iter()
        .map(|c| json!({ "name": c.name, "cost_rank": c.cost_rank, "nodes": s.config.cluster.node_count(&c.name) }))
        .collect();
    let mode = match s.config.mode {
        ExecutionMode::Simulated { .. } => "simulated",
        ExecutionMode::Local => "local",
    };
    Json(json!({
        "name": SERVICE_NAME,
        "version": SERVICE_VERSION,
        "execution_mode": mode,
        "node_classes": classes,
        "endpoints": endpoints,
    }))
}

async fn create_task(State(s): AppState, Json(req): Json<TaskRequest>) -> ApiResult<Json<Value>> {
    let id = s.create_task(req).await?;
    Ok(Json(json!({ "id": id })))
}

#[derive(Debug, Default, Deserialize)]
struct ViewQuery {
    view: Option<String>,
}

fn full_view(view: Option<&str>) -> ApiResult<bool> {
    match view.map(str::to_ascii_uppercase).as_deref() {
        None | Some("MINIMAL") => Ok(false),
        Some("FULL") => Ok(true),
        Some(other) => Err(ApiError::bad_request(format!("unknown view `{other}`; use MINIMAL or FULL"))),
    }
}

fn task_document(task: &hetsched_core::tasks::TaskRecord, full: bool) -> Value {
    if full {
        serde_json::to_value(task).expect("task serializes")
    } else {
        json!({ "id": task.id, "state": task.state })
    }
}

async fn get_task(State(s): AppState, Path(id): Path<String>, Query(q): Query<ViewQuery>) -> ApiResult<Json<Value>> {
    let full = full_view(q.view.as_deref())?;
    let v = s.view.read().expect("view lock");
    let task = v.tasks.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown task `{id}`")))?;
    Ok(Json(task_document(task, full)))
}

#[derive(Debug, Default, Deserialize)]
struct ListQuery {
    page_size: Option<usize>,
    page_token: Option<String>,
    state: Option<String>,
    view: Option<String>,
}

async fn list_tasks(State(s): AppState, Query(q): Query<ListQuery>) -> ApiResult<Json<Value>> {
    let full = full_view(q.view.as_deref())?;
    if let Some(t) = &q.page_token {
        if !is_valid_task_id(t) {
            return Err(ApiError::bad_request(format!("malformed page_token `{t}`")));
        }
    }
    let state = match &q.state {
        Some(raw) => Some(raw.parse::<TaskState>().map_err(|_| ApiError::bad_request(format!("unknown state `{raw}`")))?),
        None => None,
    };
    let page_size = q.page_size.unwrap_or(256).clamp(1, 2048);
    let page = s.view.read().expect("view lock").tasks.list(page_size, q.page_token.as_deref(), state);
    let tasks: Vec<Value> = page.tasks.iter().map(|t| task_document(t, full)).collect();
    Ok(Json(json!({ "tasks": tasks, "next_page_token": page.next_page_token })))
}

#[derive(Debug, Default, Deserialize)]
struct PackageBody {
    doi: Option<String>,
    author: Option<String>,
}

/// `POST /v1/tasks/{id}:cancel` and `POST /v1/tasks/{id}:package`.
async fn task_action(State(s): AppState, Path(raw): Path<String>, body: Option<Json<PackageBody>>) -> Response {
    let result = match raw.rsplit_once(':') {
        Some((id, "cancel")) => s.cancel_task(id).await.map(|state| Json(json!({ "id": id, "state": state }))),
        Some((id, "package")) => {
            let body = body.map(|Json(b)| b).unwrap_or_default();
            package(&s, id, PackageOptions { doi: body.doi, author: body.author })
        }
        _ => Err(ApiError::new(StatusCode::METHOD_NOT_ALLOWED, format!("unsupported action on `{raw}`"))),
    };
    match result {
        Ok(v) => v.into_response(),
        Err(e) => e.into_response(),
    }
}

fn package(s: &Shared, id: &str, options: PackageOptions) -> ApiResult<Json<Value>> {
    let task = s.view.read().expect("view lock").tasks.get(id).cloned();
    let task = task.ok_or_else(|| ApiError::not_found(format!("unknown task `{id}`")))?;
    let tool = s
        .catalog
        .resolve(&task.jobspec.tool_ref())
        .ok_or_else(|| ApiError::not_found(format!("tool `{}` is no longer registered", task.jobspec.tool_ref())))?;
    let package = build_crate(&task, &tool, &options)?;
    let dir = s.config.state_dir.join("crates").join(id);
    let manifest = write_crate(&package, &dir)?;
    let report = validate_crate(&dir);
    Ok(Json(json!({
        "task_id": id,
        "path": dir,
        "files": manifest,
        "entities": package.graph.len(),
        "validation_failures": report.failures,
    })))
}

async fn get_crate(State(s): AppState, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let path = s.config.state_dir.join("crates").join(&id).join(METADATA_FILE);
    let bytes = std::fs::read(&path).map_err(|_| ApiError::not_found(format!("task `{id}` has not been packaged")))?;
    let doc: Value = serde_json::from_slice(&bytes).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(doc))
}

async fn create_run(State(s): AppState, Json(req): Json<RunRequest>) -> ApiResult<Json<Value>> {
    let id = s.create_run(req).await?;
    Ok(Json(json!({ "id": id })))
}

async fn get_run(State(s): AppState, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let v = s.view.read().expect("view lock");
    let run = v.runs.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown run `{id}`")))?;
    Ok(Json(serde_json::to_value(run).expect("run serializes")))
}

#[derive(Debug, Default, Deserialize)]
struct JobsQuery {
    tool_id: Option<String>,
    state: Option<String>,
    since: Option<f64>,
}

async fn jobs_report(State(s): AppState, Query(q): Query<JobsQuery>) -> ApiResult<Json<Value>> {
    let state = match &q.state {
        Some(raw) => Some(raw.parse::<TaskState>().map_err(|_| ApiError::bad_request(format!("unknown state `{raw}`")))?),
        None => None,
    };
    let filter = JobFilter { tool_id: q.tool_id, state, since: q.since };
    let jobs = s.view.read().expect("view lock").stats.job_report(&filter);
    Ok(Json(json!({ "jobs": jobs })))
}

#[derive(Debug, Default, Deserialize)]
struct LoadQuery {
    from: Option<f64>,
    to: Option<f64>,
}

async fn load_report(State(s): AppState, Query(q): Query<LoadQuery>) -> ApiResult<Json<Value>> {
    let v = s.view.read().expect("view lock");
    let to = q.to.unwrap_or_else(now_seconds);
    let from = q.from.unwrap_or_else(|| v.stats.events().first().map_or(to - 3600.0, |e| e.time));
    let from = if from >= to { to - 1.0 } else { from };
    let mut report = serde_json::to_value(v.stats.cluster_load_report(from, to, &s.config.cluster)?).expect("report serializes");
    report["current_queue_length"] = json!(v.queue_len);
    Ok(Json(report))
}

#[derive(Debug, Default, Deserialize)]
struct ToolsQuery {
    visibility: Option<Visibility>,
}

async fn list_tools(State(s): AppState, Query(q): Query<ToolsQuery>) -> ApiResult<Json<Value>> {
    s.catalog.refresh()?;
    let tools: Vec<Value> = s
        .catalog
        .list(q.visibility)
        .into_iter()
        .map(|r| {
            json!({
                "id": r.descriptor.id,
                "version": r.descriptor.version,
                "label": r.descriptor.label,
                "image_ref": r.descriptor.image_ref,
                "visibility": r.visibility,
                "uploaded_at": r.uploaded_at,
                "profiled": s.profiles.get(&r.descriptor.id).is_some(),
            })
        })
        .collect();
    Ok(Json(json!({ "tools": tools })))
}

/// Body is a CWL document; `?visibility=private` registers it privately.
async fn register_tool(State(s): AppState, Query(q): Query<ToolsQuery>, body: String) -> ApiResult<Response> {
    let tool = parse_tool(&body)?;
    let record = s.catalog.register(tool, q.visibility.unwrap_or(Visibility::Public))?;
    Ok((StatusCode::CREATED, Json(serde_json::to_value(record).expect("record serializes"))).into_response())
}

fn resolve_tool(s: &Shared, reference: &str) -> ApiResult<ToolDescriptor> {
    s.catalog.resolve(reference).ok_or_else(|| ApiError::not_found(format!("unknown tool `{reference}`")))
}

async fn get_tool(State(s): AppState, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let (tid, version) = split_tool_ref(&id);
    let record = s
        .catalog
        .get(tid, version)
        .ok_or_else(|| ApiError::not_found(format!("unknown tool `{id}`")))?;
    let form = render_form_schema(&record.descriptor);
    Ok(Json(json!({ "record": record, "form": form })))
}

async fn get_form(State(s): AppState, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let tool = resolve_tool(&s, &id)?;
    Ok(Json(serde_json::to_value(render_form_schema(&tool)).expect("form serializes")))
}

fn profile_summary(p: &ExecutionProfile) -> Value {
    json!({
        "tool_id": p.tool_id,
        "family": p.model.family,
        "hyperparams": p.model.hyperparams,
        "cv_accuracy": p.cv_accuracy,
        "sample_count": p.sample_count,
        "degenerate": p.degenerate,
        "created_at": p.created_at,
    })
}

#[derive(Debug, Default, Deserialize)]
struct SuggestQuery {
    /// JSON object of raw bindings.
    bindings: Option<String>,
}

async fn suggest(State(s): AppState, Path(id): Path<String>, Query(q): Query<SuggestQuery>) -> ApiResult<Json<Value>> {
    let tool = resolve_tool(&s, &id)?;
    let raw: serde_json::Map<String, Value> = match q.bindings.as_deref() {
        None | Some("") => serde_json::Map::new(),
        Some(text) => serde_json::from_str(text)
            .map_err(|e| ApiError::bad_request(format!("bindings must be a JSON object: {e}")))?,
    };
    let bindings = tool.coerce_bindings(&raw).map_err(|f| ApiError { fields: f, ..ApiError::bad_request("invalid bindings") })?;
    s.profiles.refresh()?;
    let Some(profile) = s.profiles.get(&tool.id) else {
        return Ok(Json(json!({ "tool_id": tool.id, "suggestion": null, "profile": null })));
    };
    let suggestion = profile.predict(&tool, &bindings)?;
    Ok(Json(json!({ "tool_id": tool.id, "suggestion": suggestion, "profile": profile_summary(&profile) })))
}

async fn get_profile(State(s): AppState, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let (tid, _) = split_tool_ref(&id);
    s.profiles.refresh()?;
    let profile = s.profiles.get(tid).ok_or_else(|| ApiError::not_found(format!("tool `{id}` has no profile")))?;
    Ok(Json(profile_summary(&profile)))
}

#[derive(Debug, Deserialize)]
struct ProfileBody {
    alternatives: BTreeMap<String, Vec<Value>>,
    #[serde(default)]
    max_runs: Option<usize>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    parallelism: Option<usize>,
}

/// Runs the profiling grid directly on the configured runner (outside the
/// cluster queue) and stores the trained profile.
async fn run_profiling(State(s): AppState, Path(id): Path<String>, Json(body): Json<ProfileBody>) -> ApiResult<Json<Value>> {
    let tool = resolve_tool(&s, &id)?;
    let mut request = ProfilingRequest { tool_id: tool.id.clone(), alternatives: body.alternatives, max_runs: 500, seed: body.seed };
    if let Some(m) = body.max_runs {
        request.max_runs = m;
    }
    let options = ProfilingOptions { headroom: s.config.headroom, parallelism: body.parallelism.unwrap_or(1).max(1) };
    let shared = s.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let work = shared.config.work_dir.join("profiling");
        let runner: Box<dyn Runner> = match &shared.config.mode {
            ExecutionMode::Simulated { cost_models, .. } => {
                Box::new(SimulatedRunner::new(cost_models.clone(), [tool.clone()]).with_workspace(work))
            }
            ExecutionMode::Local => Box::new(LocalRunner { work_dir: work, tools: [(tool.id.clone(), tool.clone())].into() }),
        };
        let (profile, dataset) = profile_tool(&request, &tool, runner.as_ref(), &shared.config.cluster.classes, options, None)?;
        shared.profiles.save_samples(&dataset)?;
        shared.profiles.insert(profile.clone())?;
        let failures = dataset.failures().count();
        Ok::<_, hetsched_core::Error>((profile, dataset.samples.len(), failures))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let (profile, runs, failures) = outcome?;
    let mut summary = profile_summary(&profile);
    summary["runs"] = json!(runs);
    summary["failed_runs"] = json!(failures);
    Ok(Json(summary))
}
