//! Client for Zenodo-style open data repositories, plus a mock repository
//! server for offline tests.

pub mod mock;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use md5::{Digest, Md5};
use reqwest::{Method, RequestBuilder, Response, StatusCode};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum RepoError {
    #[error("record `{0}` not found")]
    RecordNotFound(String),
    #[error("repository returned HTTP {status}: {message}")]
    Repository { status: u16, message: String },
    #[error("unexpected response from repository: {0}")]
    Protocol(String),
    #[error("checksum mismatch for `{name}`: expected {expected}, got {actual}")]
    ChecksumMismatch { name: String, expected: String, actual: String },
    #[error("record has no file named `{0}`")]
    UnknownFile(String),
    #[error("authentication failed (HTTP 401); check the access token")]
    Auth,
    #[error("network error: {0}")]
    Network(String),
    #[error("invalid repository configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RepoError>;

impl From<reqwest::Error> for RepoError {
    fn from(e: reqwest::Error) -> Self {
        RepoError::Network(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepositoryConfig {
    pub name: String,
    pub base_url: String,
    #[serde(default, skip_serializing)]
    pub access_token: Option<String>,
    /// Per-request timeout.
    #[serde(default = "default_timeout")]
    pub timeout: Duration,
    /// Back-off before each retry of an idempotent GET.
    #[serde(default = "default_retry_delays")]
    pub retry_delays: Vec<Duration>,
}

fn default_timeout() -> Duration {
    Duration::from_secs(30)
}

fn default_retry_delays() -> Vec<Duration> {
    vec![Duration::from_millis(500), Duration::from_secs(1), Duration::from_secs(2)]
}

impl RepositoryConfig {
    pub fn new(name: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            access_token: None,
            timeout: default_timeout(),
            retry_delays: default_retry_delays(),
        }
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.access_token = Some(token.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(RepoError::Config(format!("base_url `{}` must be an absolute http(s) URL", self.base_url)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFile {
    pub name: String,
    pub size: u64,
    /// `md5:<hex>`
    pub checksum: String,
    pub download_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetadata {
    pub record_id: String,
    pub title: String,
    pub files: Vec<RecordFile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepositState {
    Draft,
    Published,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepositHandle {
    pub deposit_id: String,
    pub state: DepositState,
    #[serde(default)]
    pub doi: Option<String>,
    /// Upload location for files.
    pub bucket_url: String,
    #[serde(default)]
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DepositMetadata {
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub creators: Vec<String>,
}

pub fn md5_hex(bytes: &[u8]) -> String {
    format!("{:x}", Md5::digest(bytes))
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| RepoError::Protocol(format!("missing `{key}`")))
}

fn string_of(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_record(body: &Value) -> Result<RecordMetadata> {
    let record_id = string_of(field(body, "id")?).ok_or_else(|| RepoError::Protocol("`id` is not a scalar".into()))?;
    let title = body.pointer("/metadata/title").and_then(Value::as_str).unwrap_or_default().to_string();
    let files = field(body, "files")?.as_array().ok_or_else(|| RepoError::Protocol("`files` is not an array".into()))?;
    let mut out: Vec<RecordFile> = Vec::with_capacity(files.len());
    for f in files {
        let name = f.get("key").and_then(Value::as_str).ok_or_else(|| RepoError::Protocol("file without `key`".into()))?;
        let size = f.get("size").and_then(Value::as_u64).ok_or_else(|| RepoError::Protocol(format!("file `{name}` without size")))?;
        let checksum = f.get("checksum").and_then(Value::as_str).unwrap_or_default();
        if !checksum.starts_with("md5:") {
            return Err(RepoError::Protocol(format!("file `{name}` has no md5 checksum")));
        }
        let download_url = f
            .pointer("/links/self")
            .and_then(Value::as_str)
            .ok_or_else(|| RepoError::Protocol(format!("file `{name}` has no download link")))?;
        if out.iter().any(|o| o.name == name) {
            return Err(RepoError::Protocol(format!("duplicate file name `{name}`")));
        }
        out.push(RecordFile { name: name.into(), size, checksum: checksum.into(), download_url: download_url.into() });
    }
    Ok(RecordMetadata { record_id, title, files: out })
}

fn parse_deposit(body: &Value) -> Result<DepositHandle> {
    let deposit_id = string_of(field(body, "id")?).ok_or_else(|| RepoError::Protocol("`id` is not a scalar".into()))?;
    let published = body.get("submitted").and_then(Value::as_bool).unwrap_or(false)
        || body.get("state").and_then(Value::as_str) == Some("done");
    let doi = body.get("doi").and_then(Value::as_str).filter(|d| !d.is_empty()).map(str::to_string);
    if published != doi.is_some() {
        return Err(RepoError::Protocol("published deposits must carry a DOI and drafts must not".into()));
    }
    let bucket_url = body
        .pointer("/links/bucket")
        .and_then(Value::as_str)
        .ok_or_else(|| RepoError::Protocol("deposit has no bucket link".into()))?
        .to_string();
    let files = body
        .get("files")
        .and_then(Value::as_array)
        .map(|fs| fs.iter().filter_map(|f| f.get("key").and_then(Value::as_str).map(str::to_string)).collect())
        .unwrap_or_default();
    Ok(DepositHandle {
        deposit_id,
        state: if published { DepositState::Published } else { DepositState::Draft },
        doi,
        bucket_url,
        files,
    })
}

async fn error_for(resp: Response) -> RepoError {
    let status = resp.status();
    if status == StatusCode::UNAUTHORIZED {
        return RepoError::Auth;
    }
    let text = resp.text().await.unwrap_or_default();
    let message = serde_json::from_str::<Value>(&text)
        .ok()
        .and_then(|v| v.get("message").and_then(Value::as_str).map(str::to_string))
        .unwrap_or(text);
    RepoError::Repository { status: status.as_u16(), message }
}

fn retryable(err: &RepoError) -> bool {
    match err {
        RepoError::Network(_) => true,
        RepoError::Repository { status, .. } => *status >= 500 || *status == 429,
        _ => false,
    }
}

/// Stateless repository client; every call is independent.
#[derive(Debug, Clone)]
pub struct RepoClient {
    config: RepositoryConfig,
    http: reqwest::Client,
}

impl RepoClient {
    pub fn new(config: RepositoryConfig) -> Result<Self> {
        config.validate()?;
        let http = reqwest::Client::builder().timeout(config.timeout).build()?;
        Ok(Self { config, http })
    }

    pub fn config(&self) -> &RepositoryConfig {
        &self.config
    }

    fn request(&self, method: Method, url: &str) -> RequestBuilder {
        let req = self.http.request(method, url);
        match &self.config.access_token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    /// Runs `op` with the configured back-off. Only used for GETs.
    async fn with_retry<T, F, Fut>(&self, what: &str, mut op: F) -> Result<T>
    where
        F: FnMut() -> Fut,
        Fut: std::future::Future<Output = Result<T>>,
    {
        let mut delays = self.config.retry_delays.iter();
        loop {
            match op().await {
                Err(e) if retryable(&e) => match delays.next() {
                    Some(d) => {
                        tracing::warn!("{what} failed ({e}); retrying in {d:?}");
                        tokio::time::sleep(*d).await;
                    }
                    None => return Err(e),
                },
                other => return other,
            }
        }
    }

    pub async fn fetch_record(&self, record_id: &str) -> Result<RecordMetadata> {
        let url = format!("{}/api/records/{record_id}", self.config.base_url);
        self.with_retry("fetch record", || async {
            let resp = self.request(Method::GET, &url).send().await?;
            if resp.status() == StatusCode::NOT_FOUND {
                return Err(RepoError::RecordNotFound(record_id.to_string()));
            }
            if !resp.status().is_success() {
                return Err(error_for(resp).await);
            }
            let body: Value = resp.json().await.map_err(|e| RepoError::Protocol(e.to_string()))?;
            parse_record(&body)
        })
        .await
    }

    /// Downloads one file of `record` to `<dest_dir>/<name>`. The bytes go to
    /// a temporary file in `dest_dir` that is renamed into place only after
    /// the md5 checksum matches; on any failure nothing is left behind.
    pub async fn download_file(&self, record: &RecordMetadata, name: &str, dest_dir: &Path) -> Result<PathBuf> {
        let file = record.files.iter().find(|f| f.name == name).ok_or_else(|| RepoError::UnknownFile(name.to_string()))?;
        if name.contains('/') || name.contains('\\') || name == ".." {
            return Err(RepoError::Protocol(format!("unsafe file name `{name}`")));
        }
        let expected = file.checksum.trim_start_matches("md5:").to_ascii_lowercase();
        std::fs::create_dir_all(dest_dir)?;
        let dest = dest_dir.join(name);
        self.with_retry("download", || async {
            let mut tmp = tempfile::Builder::new().prefix(&format!(".{name}.")).suffix(".part").tempfile_in(dest_dir)?;
            let mut resp = self.request(Method::GET, &file.download_url).send().await?;
            if !resp.status().is_success() {
                return Err(error_for(resp).await);
            }
            let mut hasher = Md5::new();
            while let Some(chunk) = resp.chunk().await? {
                hasher.update(&chunk);
                tmp.write_all(&chunk)?;
            }
            let actual = format!("{:x}", hasher.finalize());
            if actual != expected {
                return Err(RepoError::ChecksumMismatch { name: name.to_string(), expected: expected.clone(), actual });
            }
            tmp.as_file().sync_all()?;
            tmp.persist(&dest).map_err(|e| RepoError::Io(e.error))?;
            Ok(dest.clone())
        })
        .await
    }

    /// Fetches a record and downloads every file in it.
    pub async fn pull(&self, record_id: &str, dest_dir: &Path) -> Result<Vec<PathBuf>> {
        let record = self.fetch_record(record_id).await?;
        let mut paths = Vec::with_capacity(record.files.len());
        for f in &record.files {
            paths.push(self.download_file(&record, &f.name, dest_dir).await?);
        }
        Ok(paths)
    }

    async fn send_json(&self, req: RequestBuilder) -> Result<Value> {
        let resp = req.send().await?;
        if !resp.status().is_success() {
            return Err(error_for(resp).await);
        }
        resp.json().await.map_err(|e| RepoError::Protocol(e.to_string()))
    }

    pub async fn create_deposit(&self, metadata: &DepositMetadata) -> Result<DepositHandle> {
        let url = format!("{}/api/deposit/depositions", self.config.base_url);
        let creators: Vec<Value> = metadata.creators.iter().map(|c| serde_json::json!({ "name": c })).collect();
        let body = serde_json::json!({
            "metadata": {
                "title": metadata.title,
                "description": metadata.description,
                "upload_type": "dataset",
                "creators": creators,
            }
        });
        parse_deposit(&self.send_json(self.request(Method::POST, &url).json(&body)).await?)
    }

    pub async fn upload_file(&self, handle: &DepositHandle, path: &Path) -> Result<DepositHandle> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| RepoError::Config(format!("`{}` has no file name", path.display())))?;
        let bytes = tokio::fs::read(path).await?;
        let url = format!("{}/{name}", handle.bucket_url.trim_end_matches('/'));
        let body = self.send_json(self.request(Method::PUT, &url).body(bytes.clone())).await?;
        if let Some(remote) = body.get("checksum").and_then(Value::as_str) {
            let local = format!("md5:{}", md5_hex(&bytes));
            if remote != local {
                return Err(RepoError::ChecksumMismatch { name, expected: local, actual: remote.to_string() });
            }
        }
        let mut updated = handle.clone();
        if !updated.files.contains(&name) {
            updated.files.push(name);
        }
        Ok(updated)
    }

    pub async fn publish(&self, handle: &DepositHandle) -> Result<DepositHandle> {
        let url = format!("{}/api/deposit/depositions/{}/actions/publish", self.config.base_url, handle.deposit_id);
        let published = parse_deposit(&self.send_json(self.request(Method::POST, &url)).await?)?;
        if published.state != DepositState::Published {
            return Err(RepoError::Protocol("publish did not yield a published deposit".into()));
        }
        Ok(published)
    }

    /// Creates a deposit, uploads `paths`, and publishes it.
    pub async fn push(&self, metadata: &DepositMetadata, paths: &[PathBuf]) -> Result<DepositHandle> {
        let mut handle = self.create_deposit(metadata).await?;
        for p in paths {
            handle = self.upload_file(&handle, p).await?;
        }
        self.publish(&handle).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn record_parsing() {
        let body = json!({
            "id": 7,
            "metadata": {"title": "t"},
            "files": [{"key": "a.txt", "size": 3, "checksum": "md5:abc", "links": {"self": "http://x/a"}}]
        });
        let r = parse_record(&body).unwrap();
        assert_eq!(r.record_id, "7");
        assert_eq!(r.files[0].download_url, "http://x/a");
        assert!(matches!(parse_record(&json!({"id": 7})), Err(RepoError::Protocol(_))));
        let dup = json!({"id": 1, "files": [
            {"key": "a", "size": 1, "checksum": "md5:0", "links": {"self": "u"}},
            {"key": "a", "size": 1, "checksum": "md5:0", "links": {"self": "u"}}
        ]});
        assert!(matches!(parse_record(&dup), Err(RepoError::Protocol(_))));
    }

    #[test]
    fn deposit_doi_iff_published() {
        let draft = json!({"id": 1, "submitted": false, "links": {"bucket": "b"}});
        assert_eq!(parse_deposit(&draft).unwrap().state, DepositState::Draft);
        let bad = json!({"id": 1, "submitted": true, "links": {"bucket": "b"}});
        assert!(parse_deposit(&bad).is_err());
    }

    #[test]
    fn config_requires_http_url() {
        assert!(RepositoryConfig::new("z", "ftp://x").validate().is_err());
        assert_eq!(RepositoryConfig::new("z", "https://zenodo.org/").base_url, "https://zenodo.org");
    }

    #[test]
    fn md5_of_known_string() {
        // RFC 1321 test suite.
        assert_eq!(md5_hex(b"abc"), "900150983cd24fb0d6963f7d28e17f72");
    }
}
