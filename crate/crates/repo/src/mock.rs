//! In-process mock of the repository protocol with fault injection.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde_json::{json, Value};

use crate::md5_hex;

/// Faults applied to file downloads and GET requests.
#[derive(Debug, Clone, Default)]
pub struct Faults {
    /// Flip a byte of every download.
    pub corrupt_downloads: bool,
    /// Send this many bytes of a download and then drop the connection.
    pub abort_downloads_after: Option<usize>,
    /// Answer the next N GET requests with 503.
    pub fail_next_gets: usize,
}

#[derive(Debug, Default)]
struct Deposit {
    title: String,
    files: BTreeMap<String, Vec<u8>>,
    doi: Option<String>,
}

#[derive(Debug, Default)]
struct MockState {
    base_url: String,
    token: String,
    records: BTreeMap<String, (String, BTreeMap<String, Vec<u8>>)>,
    deposits: BTreeMap<u64, Deposit>,
    next_deposit: u64,
    faults: Faults,
    get_requests: usize,
}

type Shared = Arc<Mutex<MockState>>;

/// A running mock repository bound to an ephemeral local port. Published
/// deposits get DOIs `10.5072/mock.<n>`, numbered from 1.
pub struct MockRepository {
    state: Shared,
    base_url: String,
    task: tokio::task::JoinHandle<()>,
}

impl MockRepository {
    /// Starts the server; write operations require `Bearer <token>`.
    pub async fn start(token: &str) -> std::io::Result<Self> {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let base_url = format!("http://{}", listener.local_addr()?);
        let state: Shared = Arc::new(Mutex::new(MockState {
            base_url: base_url.clone(),
            token: token.to_string(),
            next_deposit: 1,
            ..Default::default()
        }));
        let app = Router::new()
            .route("/api/records/{id}", get(get_record))
            .route("/api/records/{id}/files/{name}/content", get(get_file))
            .route("/api/deposit/depositions", post(create_deposit))
            .route("/api/deposit/depositions/{id}", get(get_deposit))
            .route("/api/deposit/depositions/{id}/actions/publish", post(publish))
            .route("/api/files/{bucket}/{name}", put(upload))
            .with_state(state.clone());
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(Self { state, base_url, task })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn add_record(&self, id: &str, title: &str, files: &[(&str, &[u8])]) {
        let files = files.iter().map(|(n, b)| (n.to_string(), b.to_vec())).collect();
        self.state.lock().unwrap().records.insert(id.to_string(), (title.to_string(), files));
    }

    pub fn set_faults(&self, faults: Faults) {
        self.state.lock().unwrap().faults = faults;
    }

    pub fn get_requests(&self) -> usize {
        self.state.lock().unwrap().get_requests
    }

    /// Files uploaded to deposit `id`.
    pub fn deposit_files(&self, id: &str) -> BTreeMap<String, Vec<u8>> {
        let id: u64 = id.parse().unwrap_or(0);
        self.state.lock().unwrap().deposits.get(&id).map(|d| d.files.clone()).unwrap_or_default()
    }
}

impl Drop for MockRepository {
    fn drop(&mut self) {
        self.task.abort();
    }
}

fn error(status: StatusCode, message: &str) -> Response {
    (status, Json(json!({ "status": status.as_u16(), "message": message }))).into_response()
}

fn authorized(state: &MockState, headers: &HeaderMap) -> bool {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == state.token)
}

/// Counts a GET and reports whether it should fail.
fn count_get(state: &mut MockState) -> bool {
    state.get_requests += 1;
    if state.faults.fail_next_gets > 0 {
        state.faults.fail_next_gets -= 1;
        return true;
    }
    false
}

async fn get_record(State(state): State<Shared>, Path(id): Path<String>) -> Response {
    let mut s = state.lock().unwrap();
    if count_get(&mut s) {
        return error(StatusCode::SERVICE_UNAVAILABLE, "injected failure");
    }
    let Some((title, files)) = s.records.get(&id) else {
        return error(StatusCode::NOT_FOUND, "record not found");
    };
    let files: Vec<Value> = files
        .iter()
        .map(|(name, bytes)| {
            json!({
                "key": name,
                "size": bytes.len(),
                "checksum": format!("md5:{}", md5_hex(bytes)),
                "links": { "self": format!("{}/api/records/{id}/files/{name}/content", s.base_url) },
            })
        })
        .collect();
    Json(json!({ "id": id, "metadata": { "title": title }, "files": files })).into_response()
}

async fn get_file(State(state): State<Shared>, Path((id, name)): Path<(String, String)>) -> Response {
    let mut s = state.lock().unwrap();
    if count_get(&mut s) {
        return error(StatusCode::SERVICE_UNAVAILABLE, "injected failure");
    }
    let Some(mut bytes) = s.records.get(&id).and_then(|(_, f)| f.get(&name)).cloned() else {
        return error(StatusCode::NOT_FOUND, "file not found");
    };
    if s.faults.corrupt_downloads && !bytes.is_empty() {
        bytes[0] ^= 0xff;
    }
    match s.faults.abort_downloads_after {
        Some(n) => {
            let head = Bytes::copy_from_slice(&bytes[..n.min(bytes.len())]);
            let chunks: Vec<Result<Bytes, std::io::Error>> =
                vec![Ok(head), Err(std::io::Error::new(std::io::ErrorKind::ConnectionAborted, "injected abort"))];
            // Advertise the full length so the client sees a truncated body.
            Response::builder()
                .header(header::CONTENT_LENGTH, bytes.len())
                .body(Body::from_stream(futures::stream::iter(chunks)))
                .unwrap()
        }
        None => bytes.into_response(),
    }
}

fn deposit_json(base: &str, id: u64, d: &Deposit) -> Value {
    let files: Vec<Value> = d
        .files
        .iter()
        .map(|(k, b)| json!({ "key": k, "size": b.len(), "checksum": format!("md5:{}", md5_hex(b)) }))
        .collect();
    json!({
        "id": id,
        "title": d.title,
        "submitted": d.doi.is_some(),
        "state": if d.doi.is_some() { "done" } else { "unsubmitted" },
        "doi": d.doi.clone().unwrap_or_default(),
        "files": files,
        "links": {
            "bucket": format!("{base}/api/files/bucket-{id}"),
            "publish": format!("{base}/api/deposit/depositions/{id}/actions/publish"),
        },
    })
}

async fn create_deposit(State(state): State<Shared>, headers: HeaderMap, body: Option<Json<Value>>) -> Response {
    let mut s = state.lock().unwrap();
    if !authorized(&s, &headers) {
        return error(StatusCode::UNAUTHORIZED, "missing or invalid token");
    }
    let title = body
        .and_then(|Json(b)| b.pointer("/metadata/title").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_default();
    let id = s.next_deposit;
    s.next_deposit += 1;
    let deposit = Deposit { title, ..Default::default() };
    let out = deposit_json(&s.base_url, id, &deposit);
    s.deposits.insert(id, deposit);
    (StatusCode::CREATED, Json(out)).into_response()
}

async fn get_deposit(State(state): State<Shared>, headers: HeaderMap, Path(id): Path<u64>) -> Response {
    let mut s = state.lock().unwrap();
    if count_get(&mut s) {
        return error(StatusCode::SERVICE_UNAVAILABLE, "injected failure");
    }
    if !authorized(&s, &headers) {
        return error(StatusCode::UNAUTHORIZED, "missing or invalid token");
    }
    match s.deposits.get(&id) {
        Some(d) => Json(deposit_json(&s.base_url, id, d)).into_response(),
        None => error(StatusCode::NOT_FOUND, "deposit not found"),
    }
}

async fn upload(
    State(state): State<Shared>,
    headers: HeaderMap,
    Path((bucket, name)): Path<(String, String)>,
    body: Bytes,
) -> Response {
    let mut s = state.lock().unwrap();
    if !authorized(&s, &headers) {
        return error(StatusCode::UNAUTHORIZED, "missing or invalid token");
    }
    let Some(id) = bucket.strip_prefix("bucket-").and_then(|i| i.parse::<u64>().ok()) else {
        return error(StatusCode::NOT_FOUND, "bucket not found");
    };
    let Some(d) = s.deposits.get_mut(&id) else {
        return error(StatusCode::NOT_FOUND, "bucket not found");
    };
    if d.doi.is_some() {
        return error(StatusCode::BAD_REQUEST, "deposit is already published");
    }
    let checksum = format!("md5:{}", md5_hex(&body));
    let size = body.len();
    d.files.insert(name.clone(), body.to_vec());
    (StatusCode::CREATED, Json(json!({ "key": name, "size": size, "checksum": checksum }))).into_response()
}

async fn publish(State(state): State<Shared>, headers: HeaderMap, Path(id): Path<u64>) -> Response {
    let mut s = state.lock().unwrap();
    if !authorized(&s, &headers) {
        return error(StatusCode::UNAUTHORIZED, "missing or invalid token");
    }
    let base = s.base_url.clone();
    let Some(d) = s.deposits.get_mut(&id) else {
        return error(StatusCode::NOT_FOUND, "deposit not found");
    };
    if d.files.is_empty() {
        return error(StatusCode::BAD_REQUEST, "cannot publish a deposit without files");
    }
    // Publishing again returns the existing DOI.
    d.doi.get_or_insert_with(|| format!("10.5072/mock.{id}"));
    (StatusCode::ACCEPTED, Json(deposit_json(&base, id, d))).into_response()
}
