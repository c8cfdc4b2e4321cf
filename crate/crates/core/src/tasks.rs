//! Task records, the TES-style lifecycle state machine, and the append-only
//! event log they are rebuilt from.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::catalog::Bindings;
use crate::cluster::ResourceVector;
use crate::error::{Error, Result};
use crate::executor::{Consumption, OutputFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Queued,
    Initializing,
    Running,
    Complete,
    ExecutorError,
    SystemError,
    Canceled,
}

impl TaskState {
    pub const ALL: [TaskState; 7] = [
        TaskState::Queued,
        TaskState::Initializing,
        TaskState::Running,
        TaskState::Complete,
        TaskState::ExecutorError,
        TaskState::SystemError,
        TaskState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Complete | TaskState::ExecutorError | TaskState::SystemError | TaskState::Canceled)
    }

    pub fn can_transition_to(self, next: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, next),
            (Queued, Initializing | Canceled)
                | (Initializing, Running | SystemError | Canceled)
                | (Running, Complete | ExecutorError | SystemError | Canceled)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Queued => "QUEUED",
            TaskState::Initializing => "INITIALIZING",
            TaskState::Running => "RUNNING",
            TaskState::Complete => "COMPLETE",
            TaskState::ExecutorError => "EXECUTOR_ERROR",
            TaskState::SystemError => "SYSTEM_ERROR",
            TaskState::Canceled => "CANCELED",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskState {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        TaskState::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown task state `{s}`"))
    }
}

/// A job submission: which tool to run and with what inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub tool_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default)]
    pub bindings: Bindings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource_request: Option<ResourceVector>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

impl JobSpec {
    pub fn new(tool_id: impl Into<String>, bindings: Bindings) -> Self {
        Self { tool_id: tool_id.into(), version: None, bindings, resource_request: None, tags: BTreeMap::new() }
    }

    /// `tool_id` or `tool_id@version`.
    pub fn tool_ref(&self) -> String {
        match &self.version {
            Some(v) => format!("{}@{v}", self.tool_id),
            None => self.tool_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLogs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_status: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumption: Option<Consumption>,
}

/// Times are seconds: Unix epoch for the service, simulated clock otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub state: TaskState,
    pub creation_time: f64,
    pub jobspec: JobSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<String>,
    #[serde(default)]
    pub logs: TaskLogs,
    #[serde(default)]
    pub outputs: Vec<OutputFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TaskEventKind {
    Created {
        jobspec: JobSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        suggestion: Option<String>,
    },
    Transition {
        to: TaskState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        node_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        node_class: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exit_status: Option<i32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        consumption: Option<Consumption>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        outputs: Vec<OutputFile>,
    },
}

/// One lifecycle event; the single source of truth for task state and
/// job statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvent {
    pub seq: u64,
    pub time: f64,
    pub task_id: String,
    pub kind: TaskEventKind,
}

impl TaskEvent {
    pub fn transition(seq: u64, time: f64, task_id: impl Into<String>, to: TaskState) -> Self {
        TaskEvent {
            seq,
            time,
            task_id: task_id.into(),
            kind: TaskEventKind::Transition {
                to,
                node_id: None,
                node_class: None,
                exit_status: None,
                consumption: None,
                outputs: Vec::new(),
            },
        }
    }
}

/// In-memory task table, mutated only by applying events.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TaskStore {
    last_seq: u64,
    tasks: BTreeMap<String, TaskRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskPage {
    pub tasks: Vec<TaskRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub next_page_token: Option<String>,
}

impl TaskStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn next_seq(&self) -> u64 {
        self.last_seq + 1
    }

    pub fn get(&self, id: &str) -> Option<&TaskRecord> {
        self.tasks.get(id)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaskRecord> {
        self.tasks.values()
    }

    /// Checks an event against the state machine without applying it.
    pub fn check(&self, event: &TaskEvent) -> Result<()> {
        match &event.kind {
            TaskEventKind::Created { .. } => {
                if self.tasks.contains_key(&event.task_id) {
                    return Err(Error::DuplicateId(format!("task `{}`", event.task_id)));
                }
            }
            TaskEventKind::Transition { to, .. } => {
                let task = self.tasks.get(&event.task_id).ok_or_else(|| Error::UnknownTask(event.task_id.clone()))?;
                if !task.state.can_transition_to(*to) {
                    return Err(Error::IllegalTransition { task: event.task_id.clone(), from: task.state, to: *to });
                }
            }
        }
        Ok(())
    }

    /// Applies one event, rejecting illegal transitions.
    pub fn apply(&mut self, event: &TaskEvent) -> Result<()> {
        self.check(event)?;
        match &event.kind {
            TaskEventKind::Created { jobspec, suggestion } => {
                self.tasks.insert(
                    event.task_id.clone(),
                    TaskRecord {
                        id: event.task_id.clone(),
                        state: TaskState::Queued,
                        creation_time: event.time,
                        jobspec: jobspec.clone(),
                        suggestion: suggestion.clone(),
                        logs: TaskLogs::default(),
                        outputs: Vec::new(),
                    },
                );
            }
            TaskEventKind::Transition { to, node_id, node_class, exit_status, consumption, outputs } => {
                let task = self.tasks.get_mut(&event.task_id).expect("checked");
                task.state = *to;
                if node_id.is_some() {
                    task.logs.node_id.clone_from(node_id);
                }
                if node_class.is_some() {
                    task.logs.node_class.clone_from(node_class);
                }
                if *to == TaskState::Running {
                    task.logs.start_time = Some(event.time);
                }
                if to.is_terminal() {
                    // A task canceled before it started has no end time.
                    if task.logs.start_time.is_some() {
                        task.logs.end_time = Some(event.time);
                    }
                    task.logs.exit_status = *exit_status;
                    task.logs.consumption.clone_from(consumption);
                    task.outputs.clone_from(outputs);
                }
            }
        }
        self.last_seq = self.last_seq.max(event.seq);
        Ok(())
    }

    /// Lists tasks in id order, starting after `page_token`.
    pub fn list(&self, page_size: usize, page_token: Option<&str>, state: Option<TaskState>) -> TaskPage {
        use std::ops::Bound;
        let lower = match page_token {
            Some(t) => Bound::Excluded(t.to_string()),
            None => Bound::Unbounded,
        };
        let page_size = page_size.max(1);
        let mut matching = self
            .tasks
            .range((lower, Bound::Unbounded))
            .map(|(_, t)| t)
            .filter(|t| state.is_none_or(|s| t.state == s));
        let tasks: Vec<TaskRecord> = matching.by_ref().take(page_size).cloned().collect();
        let next_page_token = if tasks.len() == page_size && matching.next().is_some() {
            tasks.last().map(|t| t.id.clone())
        } else {
            None
        };
        TaskPage { tasks, next_page_token }
    }
}

/// Generates time-sortable, monotonically increasing task ids (ULIDs).
#[derive(Default)]
pub struct TaskIdGenerator {
    inner: Mutex<ulid::Generator>,
}

impl std::fmt::Debug for TaskIdGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskIdGenerator").finish_non_exhaustive()
    }
}

impl TaskIdGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&self) -> String {
        let mut generator = self.inner.lock().expect("id generator lock");
        loop {
            // Overflow within one millisecond is astronomically unlikely; retry.
            if let Ok(id) = generator.generate() {
                return id.to_string();
            }
        }
    }
}

/// Whether `token` is a syntactically valid task id / page token.
pub fn is_valid_task_id(token: &str) -> bool {
    ulid::Ulid::from_string(token).is_ok()
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    store: TaskStore,
}

/// Durable event log `tasks.log` (JSON lines) with periodic snapshots in
/// `tasks.snapshot.json`. Recovery loads the snapshot and replays newer events.
#[derive(Debug)]
pub struct EventLog {
    log_path: PathBuf,
    snapshot_path: PathBuf,
    file: File,
    since_snapshot: usize,
    snapshot_every: usize,
}

impl EventLog {
    pub const DEFAULT_SNAPSHOT_EVERY: usize = 200;

    /// Opens the log in `state_dir` and rebuilds the task table from it.
    pub fn open(state_dir: &Path) -> Result<(Self, TaskStore, Vec<TaskEvent>)> {
        fs::create_dir_all(state_dir)?;
        let log_path = state_dir.join("tasks.log");
        let snapshot_path = state_dir.join("tasks.snapshot.json");
        let (store, events) = Self::recover(state_dir)?;
        let file = OpenOptions::new().create(true).append(true).open(&log_path)?;
        let log = EventLog {
            log_path,
            snapshot_path,
            file,
            since_snapshot: 0,
            snapshot_every: Self::DEFAULT_SNAPSHOT_EVERY,
        };
        Ok((log, store, events))
    }

    pub fn with_snapshot_every(mut self, every: usize) -> Self {
        self.snapshot_every = every.max(1);
        self
    }

    /// Rebuilds the store; also returns the full event history, which the
    /// statistics views are derived from.
    pub fn recover(state_dir: &Path) -> Result<(TaskStore, Vec<TaskEvent>)> {
        let snapshot_path = state_dir.join("tasks.snapshot.json");
        let mut store = match fs::read(&snapshot_path) {
            Ok(bytes) => serde_json::from_slice::<Snapshot>(&bytes)?.store,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => TaskStore::new(),
            Err(e) => return Err(e.into()),
        };
        let events = read_events(&state_dir.join("tasks.log"))?;
        let snapshot_seq = store.last_seq;
        for event in events.iter().filter(|e| e.seq > snapshot_seq) {
            store.apply(event)?;
        }
        Ok((store, events))
    }

    pub fn append(&mut self, event: &TaskEvent, store: &TaskStore) -> Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.since_snapshot += 1;
        if self.since_snapshot >= self.snapshot_every {
            self.snapshot(store)?;
        }
        Ok(())
    }

    pub fn snapshot(&mut self, store: &TaskStore) -> Result<()> {
        let tmp = self.snapshot_path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(&Snapshot { store: store.clone() })?)?;
        fs::rename(&tmp, &self.snapshot_path)?;
        self.since_snapshot = 0;
        Ok(())
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }
}

fn read_events(path: &Path) -> Result<Vec<TaskEvent>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut events = Vec::new();
    let lines: Vec<String> = BufReader::new(file).lines().collect::<std::io::Result<_>>()?;
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(event) => events.push(event),
            // A torn final line from a crash mid-append is dropped.
            Err(_) if i == last => tracing::warn!("ignoring truncated final line in {}", path.display()),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(events)
}
