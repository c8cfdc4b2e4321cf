use std::path::{Path, PathBuf};
use std::time::Duration;

use hetsched_repo::RepositoryConfig;
use serde::Deserialize;

use crate::CliError;

pub const DEFAULT_CONFIG_FILE: &str = "hetsched.yaml";
pub const DEFAULT_STATE_DIR: &str = ".hetsched";
pub const DEFAULT_API_URL: &str = "http://127.0.0.1:8080";
pub const TOKEN_ENV: &str = "HETSCHED_REPO_TOKEN";

/// Contents of `hetsched.yaml`. Relative paths are taken relative to the
/// file itself.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    state_dir: Option<PathBuf>,
    work_dir: Option<PathBuf>,
    cluster: Option<PathBuf>,
    cost_model: Option<PathBuf>,
    api_url: Option<String>,
    #[serde(default)]
    repositories: Vec<RepoEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RepoEntry {
    name: String,
    base_url: String,
    timeout_seconds: Option<u64>,
}

/// Flag values that override the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub state_dir: Option<PathBuf>,
    pub api_url: Option<String>,
    pub cluster: Option<PathBuf>,
    pub cost_model: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct CliConfig {
    pub state_dir: PathBuf,
    pub work_dir: PathBuf,
    pub cluster_spec: Option<PathBuf>,
    pub cost_model: Option<PathBuf>,
    pub api_url: String,
    pub repositories: Vec<RepositoryConfig>,
}

impl CliConfig {
    /// Flags win over the file, the file over defaults. An explicit
    /// `--config` must exist; the default file is optional.
    pub fn resolve(flags: Overrides) -> Result<Self, CliError> {
        let (file, base) = match &flags.config {
            Some(path) => (read_file(path)?, path.parent().map(Path::to_path_buf)),
            None => {
                let path = Path::new(DEFAULT_CONFIG_FILE);
                if path.exists() {
                    (read_file(path)?, None)
                } else {
                    (FileConfig::default(), None)
                }
            }
        };
        let rel = |p: PathBuf| match &base {
            Some(b) if p.is_relative() && !b.as_os_str().is_empty() => b.join(p),
            _ => p,
        };
        let state_dir = flags
            .state_dir
            .or_else(|| file.state_dir.map(rel))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_STATE_DIR));
        let work_dir = file.work_dir.map(rel).unwrap_or_else(|| state_dir.join("work"));
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        let repositories = file
            .repositories
            .into_iter()
            .map(|r| {
                let mut c = RepositoryConfig::new(r.name, r.base_url);
                if let Some(t) = r.timeout_seconds {
                    c.timeout = Duration::from_secs(t);
                }
                if let Some(t) = &token {
                    c = c.with_token(t.clone());
                }
                c
            })
            .collect();
        Ok(Self {
            cluster_spec: flags.cluster.or_else(|| file.cluster.map(rel)),
            cost_model: flags.cost_model.or_else(|| file.cost_model.map(rel)),
            api_url: flags
                .api_url
                .or(file.api_url)
                .unwrap_or_else(|| DEFAULT_API_URL.to_string())
                .trim_end_matches('/')
                .to_string(),
            state_dir,
            work_dir,
            repositories,
        })
    }

    pub fn cluster_path(&self) -> Result<&Path, CliError> {
        self.cluster_spec
            .as_deref()
            .ok_or_else(|| CliError::User("no cluster spec configured; pass --cluster or set `cluster` in hetsched.yaml".into()))
    }

    /// Repository by name, the only configured one, or an ad hoc URL.
    pub fn repository(&self, name: Option<&str>, url: Option<&str>) -> Result<RepositoryConfig, CliError> {
        if let Some(url) = url {
            let mut c = RepositoryConfig::new(name.unwrap_or("adhoc"), url);
            if let Ok(t) = std::env::var(TOKEN_ENV) {
                if !t.is_empty() {
                    c = c.with_token(t);
                }
            }
            return Ok(c);
        }
        match name {
            Some(n) => self
                .repositories
                .iter()
                .find(|r| r.name == n)
                .cloned()
                .ok_or_else(|| CliError::User(format!("no repository named `{n}` in the config"))),
            None => match self.repositories.as_slice() {
                [only] => Ok(only.clone()),
                [] => Err(CliError::User("no repository configured; pass --url".into())),
                _ => Err(CliError::User("several repositories configured; pass --repo".into())),
            },
        }
    }
}

fn read_file(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Ok(FileConfig::default());
    }
    serde_yaml::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}
