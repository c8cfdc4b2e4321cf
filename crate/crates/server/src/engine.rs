//! The scheduler loop: the only writer of task, statistics and run state.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use hetsched_core::catalog::{Catalog, ToolDescriptor};
use hetsched_core::executor::{run_local, run_simulated, RunResult};
use hetsched_core::monitoring::StatsStore;
use hetsched_core::profiler::ProfileStore;
use hetsched_core::scheduler::{suggest_node_class, QueueEntry, ScheduleDecision, Scheduler};
use hetsched_core::tasks::{EventLog, JobSpec, TaskEvent, TaskEventKind, TaskIdGenerator, TaskState, TaskStore};
use hetsched_core::workflow::{RunRecord, RunTracker};
use hetsched_core::{Error, Result};
use tokio::sync::{mpsc, oneshot};

use crate::config::{ExecutionMode, ServiceConfig};

/// State served to readers. Only the loop takes the write lock.
#[derive(Debug, Default)]
pub struct View {
    pub tasks: TaskStore,
    pub stats: StatsStore,
    pub runs: BTreeMap<String, RunRecord>,
    pub queue_len: usize,
}

pub(crate) enum Command {
    CreateTask { job: JobSpec, reply: oneshot::Sender<Result<String>> },
    Cancel { id: String, reply: oneshot::Sender<Result<TaskState>> },
    CreateRun { tracker: Box<RunTracker>, reply: oneshot::Sender<Result<String>> },
    Finished { task_id: String, outcome: Result<RunResult> },
}

pub(crate) fn now_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub(crate) struct Engine {
    config: Arc<ServiceConfig>,
    catalog: Arc<Catalog>,
    profiles: Arc<ProfileStore>,
    ids: Arc<TaskIdGenerator>,
    view: Arc<RwLock<View>>,
    tx: mpsc::UnboundedSender<Command>,
    log: EventLog,
    scheduler: Scheduler,
    trackers: BTreeMap<String, RunTracker>,
    run_of: BTreeMap<String, String>,
    cancel_flags: BTreeMap<String, Arc<AtomicBool>>,
    last_time: f64,
}

impl Engine {
    /// Recovers persisted state. Queued tasks are re-enqueued; tasks that were
    /// running when the service stopped end in SYSTEM_ERROR.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn start(
        config: Arc<ServiceConfig>,
        catalog: Arc<Catalog>,
        profiles: Arc<ProfileStore>,
        ids: Arc<TaskIdGenerator>,
        view: Arc<RwLock<View>>,
        tx: mpsc::UnboundedSender<Command>,
    ) -> Result<Self> {
        let (log, tasks, events) = EventLog::open(&config.state_dir)?;
        let log = log.with_snapshot_every(config.snapshot_every);
        let stats = StatsStore::from_events(&events)?;
        let last_time = events.iter().map(|e| e.time).fold(0.0, f64::max);
        let runs = load_runs(&config.state_dir.join("runs"));
        *view.write().expect("view lock") = View { tasks, stats, runs, queue_len: 0 };
        let scheduler = Scheduler::new(config.cluster.clone()).with_jobs_per_node(config.jobs_per_node);
        let mut engine = Engine {
            config,
            catalog,
            profiles,
            ids,
            view,
            tx,
            log,
            scheduler,
            trackers: BTreeMap::new(),
            run_of: BTreeMap::new(),
            cancel_flags: BTreeMap::new(),
            last_time,
        };
        engine.recover()?;
        Ok(engine)
    }

    fn recover(&mut self) -> Result<()> {
        let pending: Vec<(String, TaskState, JobSpec, Option<String>, f64)> = {
            let v = self.view.read().expect("view lock");
            v.tasks
                .iter()
                .filter(|t| !t.state.is_terminal())
                .map(|t| (t.id.clone(), t.state, t.jobspec.clone(), t.suggestion.clone(), t.creation_time))
                .collect()
        };
        for (id, state, job, suggestion, created) in pending {
            if state == TaskState::Queued {
                let entry = QueueEntry { task_id: id.clone(), job, submit_time: created, suggestion };
                if entry.suggestion.as_ref().is_none_or(|s| self.config.cluster.class(s).is_some())
                    && self.scheduler.is_placeable(&entry)
                {
                    self.scheduler.enqueue(entry)?;
                    continue;
                }
                self.emit(&id, transition(TaskState::Canceled, None))?;
            } else {
                tracing::warn!("task {id} was {state} when the service stopped");
                self.emit(&id, transition(TaskState::SystemError, None))?;
            }
        }
        // Runs cannot be resumed without their trackers.
        let open: Vec<RunRecord> = {
            let v = self.view.read().expect("view lock");
            v.runs.values().filter(|r| !r.state.is_terminal()).cloned().collect()
        };
        for mut run in open {
            run.state = TaskState::SystemError;
            self.store_run(run);
        }
        self.schedule();
        Ok(())
    }

    pub(crate) async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Command>) {
        while let Some(cmd) = rx.recv().await {
            match cmd {
                Command::CreateTask { job, reply } => {
                    let result = self.submit(job, None);
                    self.schedule();
                    let _ = reply.send(result);
                }
                Command::Cancel { id, reply } => {
                    let result = self.cancel(&id);
                    self.schedule();
                    let _ = reply.send(result);
                }
                Command::CreateRun { tracker, reply } => {
                    let result = self.create_run(*tracker);
                    self.schedule();
                    let _ = reply.send(result);
                }
                Command::Finished { task_id, outcome } => {
                    if let Err(e) = self.finish(&task_id, outcome) {
                        tracing::error!("recording completion of {task_id}: {e}");
                    }
                    self.schedule();
                }
            }
        }
    }

    fn clock(&mut self) -> f64 {
        self.last_time = now_seconds().max(self.last_time);
        self.last_time
    }

    fn emit(&mut self, task_id: &str, kind: TaskEventKind) -> Result<()> {
        let time = self.clock();
        let mut v = self.view.write().expect("view lock");
        let event = TaskEvent { seq: v.tasks.next_seq(), time, task_id: task_id.to_string(), kind };
        v.tasks.check(&event)?;
        self.log.append(&event, &v.tasks)?;
        v.tasks.apply(&event)?;
        v.stats.record_event(&event)?;
        Ok(())
    }

    fn suggestion_for(&self, job: &JobSpec, tool: &ToolDescriptor) -> Option<String> {
        if let Err(e) = self.profiles.refresh() {
            tracing::warn!("reloading profiles: {e}");
        }
        match suggest_node_class(job, tool, &self.profiles) {
            Ok(Some(class)) if self.config.cluster.class(&class).is_some() => Some(class),
            Ok(Some(class)) => {
                tracing::warn!("profile for `{}` suggests unknown class `{class}`; ignoring", tool.id);
                None
            }
            Ok(None) => None,
            Err(e) => {
                tracing::warn!("no suggestion for `{}`: {e}", tool.id);
                None
            }
        }
    }

    /// Creates and enqueues a task. Jobs no node could ever host are
    /// rejected before a task is created.
    fn submit(&mut self, job: JobSpec, step: Option<(&str, &str)>) -> Result<String> {
        let tool = self.catalog.resolve(&job.tool_ref()).ok_or_else(|| Error::UnresolvedTool(job.tool_ref()))?;
        let suggestion = self.suggestion_for(&job, &tool);
        let id = self.ids.next_id();
        let entry = QueueEntry { task_id: id.clone(), job: job.clone(), submit_time: self.clock(), suggestion: suggestion.clone() };
        if !self.scheduler.is_placeable(&entry) {
            let target = suggestion.map_or_else(|| "any node".to_string(), |s| format!("node class `{s}`"));
            return Err(Error::invalid(format!("the job's resource demand exceeds the capacity of {target}")));
        }
        self.emit(&id, TaskEventKind::Created { jobspec: job, suggestion })?;
        self.scheduler.enqueue(entry)?;
        if let Some((run_id, step_id)) = step {
            self.run_of.insert(id.clone(), run_id.to_string());
            if let Some(t) = self.trackers.get_mut(run_id) {
                t.mark_submitted(step_id, &id);
            }
        }
        Ok(id)
    }

    fn cancel(&mut self, id: &str) -> Result<TaskState> {
        let state = self.view.read().expect("view lock").tasks.get(id).map(|t| t.state);
        let state = state.ok_or_else(|| Error::UnknownTask(id.to_string()))?;
        match state {
            s if s.is_terminal() => return Ok(s),
            TaskState::Queued => {
                self.scheduler.remove_queued(id);
            }
            _ => {
                if let Some(flag) = self.cancel_flags.remove(id) {
                    flag.store(true, Ordering::SeqCst);
                }
                self.scheduler.release(id)?;
            }
        }
        self.emit(id, transition(TaskState::Canceled, None))?;
        self.on_task_update(id, TaskState::Canceled, &[]);
        Ok(TaskState::Canceled)
    }

    fn create_run(&mut self, tracker: RunTracker) -> Result<String> {
        let run_id = tracker.record.id.clone();
        self.trackers.insert(run_id.clone(), tracker);
        self.advance_run(&run_id);
        Ok(run_id)
    }

    /// Submits every ready step of a run and publishes its record.
    fn advance_run(&mut self, run_id: &str) {
        let Some(tracker) = self.trackers.get(run_id) else { return };
        let ready = tracker.ready_steps();
        for step in ready {
            let job = match self.trackers[run_id].job_for(&step) {
                Ok(j) => j,
                Err(e) => {
                    tracing::error!("run {run_id}: cannot instantiate step `{step}`: {e}");
                    self.trackers.get_mut(run_id).expect("tracker").record.state = TaskState::SystemError;
                    break;
                }
            };
            if let Err(e) = self.submit(job, Some((run_id, &step))) {
                tracing::error!("run {run_id}: cannot submit step `{step}`: {e}");
                self.trackers.get_mut(run_id).expect("tracker").record.state = TaskState::SystemError;
                break;
            }
        }
        let mut record = self.trackers[run_id].record.clone();
        if record.state.is_terminal() {
            // Stop whatever is still pending in a failed or canceled run.
            let open: Vec<String> = record
                .steps
                .values()
                .filter(|s| s.state.is_some_and(|st| !st.is_terminal()))
                .filter_map(|s| s.task_id.clone())
                .collect();
            self.trackers.remove(run_id);
            for t in &open {
                if let Err(e) = self.cancel(t) {
                    tracing::warn!("canceling {t}: {e}");
                }
            }
            for s in record.steps.values_mut().filter(|s| s.task_id.as_ref().is_some_and(|t| open.contains(t))) {
                s.state = Some(TaskState::Canceled);
            }
        }
        self.store_run(record);
    }

    fn on_task_update(&mut self, task_id: &str, state: TaskState, outputs: &[hetsched_core::executor::OutputFile]) {
        let Some(run_id) = self.run_of.get(task_id).cloned() else { return };
        let Some(tracker) = self.trackers.get_mut(&run_id) else { return };
        let to_cancel = tracker.on_task_update(task_id, state, outputs);
        for t in to_cancel {
            if let Err(e) = self.cancel(&t) {
                tracing::warn!("canceling {t}: {e}");
            }
        }
        self.advance_run(&run_id);
    }

    fn store_run(&mut self, record: RunRecord) {
        let dir = self.config.state_dir.join("runs");
        let written = std::fs::create_dir_all(&dir).and_then(|_| {
            let bytes = serde_json::to_vec_pretty(&record).map_err(std::io::Error::other)?;
            let tmp = dir.join(format!("{}.json.tmp", record.id));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(tmp, dir.join(format!("{}.json", record.id)))
        });
        if let Err(e) = written {
            tracing::error!("persisting run {}: {e}", record.id);
        }
        self.view.write().expect("view lock").runs.insert(record.id.clone(), record);
    }

    fn schedule(&mut self) {
        let now = self.clock();
        for decision in self.scheduler.tick(now) {
            if let Err(e) = self.start_task(&decision) {
                tracing::error!("starting {}: {e}", decision.task_id);
                let _ = self.scheduler.release(&decision.task_id);
                let _ = self.emit(&decision.task_id, transition(TaskState::SystemError, None));
                self.on_task_update(&decision.task_id, TaskState::SystemError, &[]);
            }
        }
        self.view.write().expect("view lock").queue_len = self.scheduler.queue_len();
    }

    fn start_task(&mut self, d: &ScheduleDecision) -> Result<()> {
        let node = Some((d.node_id.as_str(), d.node_class.as_str()));
        self.emit(&d.task_id, transition(TaskState::Initializing, node))?;
        let job = self.view.read().expect("view lock").tasks.get(&d.task_id).expect("created").jobspec.clone();
        let tool = self.catalog.resolve(&job.tool_ref()).ok_or_else(|| Error::UnresolvedTool(job.tool_ref()))?;
        self.emit(&d.task_id, transition(TaskState::Running, node))?;
        let flag = Arc::new(AtomicBool::new(false));
        self.cancel_flags.insert(d.task_id.clone(), flag.clone());

        let config = self.config.clone();
        let tx = self.tx.clone();
        let task_id = d.task_id.clone();
        tokio::task::spawn_blocking(move || {
            let outcome = execute(&config, &task_id, &job, &tool, &flag);
            let _ = tx.send(Command::Finished { task_id, outcome });
        });
        Ok(())
    }

    fn finish(&mut self, task_id: &str, outcome: Result<RunResult>) -> Result<()> {
        self.cancel_flags.remove(task_id);
        let (state, node_id, node_class) = {
            let v = self.view.read().expect("view lock");
            let t = v.tasks.get(task_id).ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
            (t.state, t.logs.node_id.clone(), t.logs.node_class.clone())
        };
        if state.is_terminal() {
            // Canceled while running; resources were released then.
            return Ok(());
        }
        self.scheduler.release(task_id)?;
        let kind = match outcome {
            Err(e) => {
                tracing::error!("task {task_id} failed to run: {e}");
                TaskEventKind::Transition {
                    to: TaskState::SystemError,
                    node_id,
                    node_class,
                    exit_status: None,
                    consumption: None,
                    outputs: Vec::new(),
                }
            }
            Ok(result) => {
                let oom = matches!(self.config.mode, ExecutionMode::Simulated { .. })
                    && node_class
                        .as_deref()
                        .and_then(|c| self.config.cluster.class(c))
                        .is_some_and(|c| result.peak_mem_mb > c.capacity.memory_mb as f64);
                let ok = result.succeeded() && !oom;
                TaskEventKind::Transition {
                    to: if ok { TaskState::Complete } else { TaskState::ExecutorError },
                    node_id,
                    node_class,
                    exit_status: Some(if oom { 137 } else { result.exit_status }),
                    consumption: Some(result.consumption()),
                    outputs: if ok { result.output_files } else { Vec::new() },
                }
            }
        };
        let (to, outputs) = match &kind {
            TaskEventKind::Transition { to, outputs, .. } => (*to, outputs.clone()),
            TaskEventKind::Created { .. } => unreachable!(),
        };
        self.emit(task_id, kind)?;
        self.on_task_update(task_id, to, &outputs);
        Ok(())
    }
}

fn transition(to: TaskState, node: Option<(&str, &str)>) -> TaskEventKind {
    TaskEventKind::Transition {
        to,
        node_id: node.map(|n| n.0.to_string()),
        node_class: node.map(|n| n.1.to_string()),
        exit_status: None,
        consumption: None,
        outputs: Vec::new(),
    }
}

fn load_runs(dir: &std::path::Path) -> BTreeMap<String, RunRecord> {
    let mut runs = BTreeMap::new();
    let Ok(entries) = std::fs::read_dir(dir) else { return runs };
    for path in entries.filter_map(|e| e.ok().map(|e| e.path())) {
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        match std::fs::read(&path).map_err(Error::from).and_then(|b| Ok(serde_json::from_slice::<RunRecord>(&b)?)) {
            Ok(r) => {
                runs.insert(r.id.clone(), r);
            }
            Err(e) => tracing::warn!("skipping run record {}: {e}", path.display()),
        }
    }
    runs
}

fn execute(config: &ServiceConfig, task_id: &str, job: &JobSpec, tool: &ToolDescriptor, cancel: &AtomicBool) -> Result<RunResult> {
    let work_dir: PathBuf = config.work_dir.clone();
    match &config.mode {
        ExecutionMode::Simulated { cost_models, time_scale } => {
            let result = run_simulated(task_id, job, tool, cost_models, config.seed, Some(&work_dir))?;
            let mut remaining = Duration::from_secs_f64((result.wall_seconds * time_scale).max(0.0));
            let step = Duration::from_millis(10);
            while !remaining.is_zero() && !cancel.load(Ordering::SeqCst) {
                let d = remaining.min(step);
                std::thread::sleep(d);
                remaining -= d;
            }
            Ok(result)
        }
        ExecutionMode::Local => run_local(task_id, job, tool, &work_dir, Some(cancel)),
    }
}
