//! Job queue, node-class suggestions, first-fit placement, and the
//! discrete-event cluster simulation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{parse_tool, Bindings, ToolDescriptor};
use crate::cluster::{ClusterSpec, ResourceVector};
use crate::error::{Error, Result};
use crate::executor::{run_simulated, CostModel, RunResult, SimulatedRunner};
use crate::profiler::{label_for, profile_tool, ProfileStore, ProfilingOptions, ProfilingRequest, DEFAULT_HEADROOM};
use crate::tasks::{JobSpec, TaskEvent, TaskEventKind, TaskState};

/// Node class predicted by the tool's execution profile, or `None` when the
/// tool has no profile.
pub fn suggest_node_class(job: &JobSpec, tool: &ToolDescriptor, profiles: &ProfileStore) -> Result<Option<String>> {
    match profiles.get(&tool.id) {
        Some(profile) => profile.predict(tool, &job.bindings).map(Some),
        None => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub task_id: String,
    pub job: JobSpec,
    pub submit_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub task_id: String,
    pub node_id: String,
    pub node_class: String,
    pub start_time: f64,
    pub demand: ResourceVector,
}

/// Queue plus cluster allocation state, owned by a single control loop.
#[derive(Debug, Clone)]
pub struct Scheduler {
    cluster: ClusterSpec,
    queue: VecDeque<QueueEntry>,
    running: BTreeMap<String, ScheduleDecision>,
    jobs_per_node: u32,
}

impl Scheduler {
    pub fn new(cluster: ClusterSpec) -> Self {
        Self { cluster, queue: VecDeque::new(), running: BTreeMap::new(), jobs_per_node: 1 }
    }

    /// Default jobs per node used when a job declares no resource request.
    pub fn with_jobs_per_node(mut self, jobs_per_node: u32) -> Self {
        self.jobs_per_node = jobs_per_node.max(1);
        self
    }

    pub fn cluster(&self) -> &ClusterSpec {
        &self.cluster
    }

    pub fn queue(&self) -> impl Iterator<Item = &QueueEntry> {
        self.queue.iter()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn running(&self) -> &BTreeMap<String, ScheduleDecision> {
        &self.running
    }

    /// Demand of `job` on a node of class `class_name`: its own request, or
    /// the class capacity split evenly over `jobs_per_node`.
    pub fn demand_for(&self, job: &JobSpec, class_name: &str) -> Option<ResourceVector> {
        match &job.resource_request {
            Some(r) => Some(r.clone()),
            None => self.cluster.class(class_name).map(|c| c.capacity.divide(self.jobs_per_node)),
        }
    }

    pub fn enqueue(&mut self, entry: QueueEntry) -> Result<()> {
        if let Some(s) = &entry.suggestion {
            if self.cluster.class(s).is_none() {
                return Err(Error::UnknownClass(s.clone()));
            }
        }
        self.queue.push_back(entry);
        Ok(())
    }

    /// Whether the entry could ever be placed on an idle candidate node.
    pub fn is_placeable(&self, entry: &QueueEntry) -> bool {
        self.candidates(entry).any(|node| {
            let class = self.cluster.class(&node.class_name).expect("validated cluster");
            self.demand_for(&entry.job, &class.name).is_some_and(|d| {
                class.capacity.covers(&d) && d.accelerators.is_subset(&class.capacity.accelerators)
            })
        })
    }

    fn candidates<'a>(&'a self, entry: &'a QueueEntry) -> impl Iterator<Item = &'a crate::cluster::Node> + 'a {
        let mut nodes: Vec<&crate::cluster::Node> = self
            .cluster
            .nodes
            .iter()
            .filter(|n| entry.suggestion.as_ref().is_none_or(|s| &n.class_name == s))
            .collect();
        nodes.sort_by(|a, b| a.id.cmp(&b.id));
        nodes.into_iter()
    }

    /// Removes a queued task. Returns `false` if it was not queued.
    pub fn remove_queued(&mut self, task_id: &str) -> bool {
        let before = self.queue.len();
        self.queue.retain(|e| e.task_id != task_id);
        self.queue.len() != before
    }

    /// One FIFO-with-skip pass: each queued entry goes to the first node (by
    /// id) among its candidates where its demand fits; entries that fit
    /// nowhere stay queued without blocking later ones.
    pub fn tick(&mut self, now: f64) -> Vec<ScheduleDecision> {
        let mut decisions = Vec::new();
        let mut waiting = VecDeque::with_capacity(self.queue.len());
        while let Some(entry) = self.queue.pop_front() {
            let placed = self.candidates(&entry).find_map(|node| {
                let demand = self.demand_for(&entry.job, &node.class_name)?;
                self.cluster.fits(&demand, node).then(|| (node.id.clone(), node.class_name.clone(), demand))
            });
            match placed {
                Some((node_id, node_class, demand)) => {
                    self.cluster.allocate_on(&node_id, &demand).expect("fits was checked");
                    let decision =
                        ScheduleDecision { task_id: entry.task_id.clone(), node_id, node_class, start_time: now, demand };
                    self.running.insert(entry.task_id.clone(), decision.clone());
                    decisions.push(decision);
                }
                None => waiting.push_back(entry),
            }
        }
        self.queue = waiting;
        decisions
    }

    /// Frees the allocation of a placed task.
    pub fn release(&mut self, task_id: &str) -> Result<ScheduleDecision> {
        let decision = self.running.remove(task_id).ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        self.cluster.release_on(&decision.node_id, &decision.demand)?;
        Ok(decision)
    }
}

/// Simulated clock resolution: times are multiples of 1/1024 s, so sums of
/// durations are exact in any order.
pub const TICKS_PER_SECOND: f64 = 1024.0;

fn to_ticks(seconds: f64) -> u64 {
    (seconds.max(0.0) * TICKS_PER_SECOND).round() as u64
}

fn to_seconds(ticks: u64) -> f64 {
    ticks as f64 / TICKS_PER_SECOND
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub at_seconds: f64,
    pub tool_id: String,
    #[serde(default)]
    pub bindings: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<ResourceVector>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    cluster: ClusterSpec,
    cost_models: CostModel,
    #[serde(default)]
    tools: Vec<serde_yaml::Value>,
    #[serde(default)]
    profiling: Vec<ProfilingRequest>,
    submissions: Vec<Submission>,
    #[serde(default)]
    use_profiles: bool,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_headroom")]
    headroom: f64,
    #[serde(default = "default_jobs_per_node")]
    jobs_per_node: u32,
}

fn default_headroom() -> f64 {
    DEFAULT_HEADROOM
}

fn default_jobs_per_node() -> u32 {
    1
}

/// A self-contained simulation input.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cluster: ClusterSpec,
    pub cost_models: CostModel,
    pub tools: BTreeMap<String, ToolDescriptor>,
    /// Profiling runs used to train profiles before simulating.
    pub profiling: Vec<ProfilingRequest>,
    pub submissions: Vec<Submission>,
    pub use_profiles: bool,
    pub seed: u64,
    pub headroom: f64,
    pub jobs_per_node: u32,
}

impl Scenario {
    /// Parses a scenario. `tools` entries are inline CWL documents or paths
    /// resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let raw: RawScenario = crate::parse_document(text)?;
        let mut tools = BTreeMap::new();
        for entry in &raw.tools {
            let tool = match entry {
                serde_yaml::Value::String(path) => {
                    let path = base_dir.map_or_else(|| Path::new(path).to_path_buf(), |b| b.join(path));
                    parse_tool(&std::fs::read_to_string(path)?)?
                }
                inline => parse_tool(&serde_yaml::to_string(inline).map_err(|e| Error::Parse(e.to_string()))?)?,
            };
            tools.insert(tool.id.clone(), tool);
        }
        let scenario = Scenario {
            cluster: raw.cluster,
            cost_models: raw.cost_models,
            tools,
            profiling: raw.profiling,
            submissions: raw.submissions,
            use_profiles: raw.use_profiles,
            seed: raw.seed,
            headroom: raw.headroom,
            jobs_per_node: raw.jobs_per_node,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        self.cost_models.validate()?;
        for s in &self.submissions {
            if !self.tools.contains_key(&s.tool_id) {
                return Err(Error::UnresolvedTool(s.tool_id.clone()));
            }
            self.cost_models.entry(&s.tool_id)?;
            if !(s.at_seconds.is_finite() && s.at_seconds >= 0.0) {
                return Err(Error::invalid("at_seconds must be a non-negative number"));
            }
        }
        for p in &self.profiling {
            if !self.tools.contains_key(&p.tool_id) {
                return Err(Error::UnresolvedTool(p.tool_id.clone()));
            }
        }
        if !(self.headroom.is_finite() && self.headroom >= 1.0) {
            return Err(Error::invalid("headroom must be >= 1"));
        }
        Ok(())
    }

    /// Runs the scenario's profiling requests on the simulated runner and
    /// trains one profile per tool.
    pub fn train_profiles(&self) -> Result<ProfileStore> {
        let store = ProfileStore::in_memory();
        let runner = SimulatedRunner::new(self.cost_models.clone(), self.tools.values().cloned());
        let options = ProfilingOptions { headroom: self.headroom, parallelism: 1 };
        for request in &self.profiling {
            let tool = &self.tools[&request.tool_id];
            let (profile, _) = profile_tool(request, tool, &runner, &self.cluster.classes, options, None)?;
            store.insert(profile)?;
        }
        Ok(store)
    }
}

/// Demand tier of a job: the class its measured consumption is labeled
/// with, or this marker when no class suffices.
pub const UNLABELED_TIER: &str = "unlabeled";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub use_profiles: bool,
    pub seed: u64,
    pub makespan: f64,
    pub per_class_busy_seconds: BTreeMap<String, f64>,
    /// class → demand tier → busy seconds.
    pub per_class_busy_by_origin: BTreeMap<String, BTreeMap<String, f64>>,
    pub mean_wait_seconds: f64,
    pub max_wait_seconds: f64,
    pub final_states: BTreeMap<String, usize>,
    pub decisions: Vec<ScheduleDecision>,
    pub trace: Vec<TaskEvent>,
}

impl SimulationReport {
    /// The event trace as JSON lines.
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }
}

/// Simulated task id for the `index`-th submission.
pub fn sim_task_id(index: usize) -> String {
    format!("sim-{:05}", index + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Completion,
    Submission,
}

struct Running {
    result: RunResult,
    state: TaskState,
    start: u64,
}

struct Trace {
    events: Vec<TaskEvent>,
}

impl Trace {
    fn push(&mut self, time: u64, task_id: &str, kind: TaskEventKind) {
        let seq = self.events.len() as u64 + 1;
        self.events.push(TaskEvent { seq, time: to_seconds(time), task_id: task_id.to_string(), kind });
    }

    fn transition(&mut self, time: u64, task_id: &str, to: TaskState, node: Option<(&str, &str)>) {
        self.push(
            time,
            task_id,
            TaskEventKind::Transition {
                to,
                node_id: node.map(|n| n.0.to_string()),
                node_class: node.map(|n| n.1.to_string()),
                exit_status: None,
                consumption: None,
                outputs: Vec::new(),
            },
        );
    }
}

/// Discrete-event simulation of the scenario.
///
/// Events are submissions and completions, processed in order of (time,
/// completion before submission, task id); a scheduling pass follows every
/// event. Job durations and consumption come from the simulated runner; a
/// job whose measured peak memory exceeds its node class's memory ends in
/// EXECUTOR_ERROR. Jobs no node could ever host are canceled at submission.
/// `profiles` is consulted only when `scenario.use_profiles` is set.
pub fn run_simulation(scenario: &Scenario, profiles: &ProfileStore) -> Result<SimulationReport> {
    scenario.validate()?;
    let mut scheduler = Scheduler::new(scenario.cluster.clone()).with_jobs_per_node(scenario.jobs_per_node);

    let mut jobs: Vec<JobSpec> = Vec::with_capacity(scenario.submissions.len());
    let mut events: BTreeSet<(u64, EventKind, String)> = BTreeSet::new();
    for (i, s) in scenario.submissions.iter().enumerate() {
        let tool = &scenario.tools[&s.tool_id];
        let bindings: Bindings = tool.coerce_bindings(&s.bindings).map_err(|errs| {
            let (field, msg) = errs.into_iter().next().expect("non-empty error map");
            Error::TypeMismatch { input: field, message: msg }
        })?;
        tool.resolve_bindings(&bindings)?;
        let mut job = JobSpec::new(s.tool_id.clone(), bindings);
        job.version = Some(tool.version.clone());
        job.resource_request = s.request.clone();
        jobs.push(job);
        events.insert((to_ticks(s.at_seconds), EventKind::Submission, sim_task_id(i)));
    }

    let mut trace = Trace { events: Vec::new() };
    let mut submit_time: BTreeMap<String, u64> = BTreeMap::new();
    let mut running: BTreeMap<String, Running> = BTreeMap::new();
    let mut decisions = Vec::new();
    let mut busy: BTreeMap<String, u64> = scenario.cluster.classes.iter().map(|c| (c.name.clone(), 0)).collect();
    let mut by_origin: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    let mut final_states: BTreeMap<String, usize> = BTreeMap::new();
    let mut waits: Vec<u64> = Vec::new();
    let mut first_submit: Option<u64> = None;
    let mut last_event = 0u64;

    while let Some((now, kind, task_id)) = events.pop_first() {
        last_event = last_event.max(now);
        let index: usize = task_id[4..].parse::<usize>().expect("simulated id") - 1;
        match kind {
            EventKind::Submission => {
                first_submit.get_or_insert(now);
                let job = jobs[index].clone();
                let tool = &scenario.tools[&job.tool_id];
                let suggestion = if scenario.use_profiles {
                    suggest_node_class(&job, tool, profiles)?.filter(|s| {
                        let known = scenario.cluster.class(s).is_some();
                        if !known {
                            tracing::warn!("profile for `{}` suggests unknown class `{s}`; ignoring", tool.id);
                        }
                        known
                    })
                } else {
                    None
                };
                trace.push(now, &task_id, TaskEventKind::Created { jobspec: job.clone(), suggestion: suggestion.clone() });
                submit_time.insert(task_id.clone(), now);
                let entry = QueueEntry { task_id: task_id.clone(), job, submit_time: to_seconds(now), suggestion };
                if scheduler.is_placeable(&entry) {
                    scheduler.enqueue(entry)?;
                } else {
                    tracing::warn!("{task_id} fits no node; canceled");
                    trace.transition(now, &task_id, TaskState::Canceled, None);
                    *final_states.entry(TaskState::Canceled.to_string()).or_insert(0) += 1;
                }
            }
            EventKind::Completion => {
                let done = running.remove(&task_id).expect("completion for a running task");
                let decision = scheduler.release(&task_id)?;
                let duration = now - done.start;
                *busy.entry(decision.node_class.clone()).or_insert(0) += duration;
                let consumption = done.result.consumption();
                let tier = label_for(&consumption, &scenario.cluster.classes, scenario.headroom)
                    .map_or_else(|| UNLABELED_TIER.to_string(), |c| c.name.clone());
                *by_origin.entry(decision.node_class.clone()).or_default().entry(tier).or_insert(0) += duration;
                let exit_status = if done.state == TaskState::Complete { done.result.exit_status } else { 137 };
                trace.push(
                    now,
                    &task_id,
                    TaskEventKind::Transition {
                        to: done.state,
                        node_id: Some(decision.node_id.clone()),
                        node_class: Some(decision.node_class.clone()),
                        exit_status: Some(exit_status),
                        consumption: Some(consumption),
                        outputs: if done.state == TaskState::Complete { done.result.output_files } else { Vec::new() },
                    },
                );
                *final_states.entry(done.state.to_string()).or_insert(0) += 1;
            }
        }

        for decision in scheduler.tick(to_seconds(now)) {
            let id = decision.task_id.clone();
            let node = (decision.node_id.as_str(), decision.node_class.as_str());
            trace.transition(now, &id, TaskState::Initializing, Some(node));
            trace.transition(now, &id, TaskState::Running, Some(node));
            waits.push(now - submit_time[&id]);

            let i: usize = id[4..].parse::<usize>().expect("simulated id") - 1;
            let job = &jobs[i];
            let tool = &scenario.tools[&job.tool_id];
            let result = run_simulated(&id, job, tool, &scenario.cost_models, scenario.seed, None)?;
            let class_memory = scenario.cluster.class(&decision.node_class).expect("validated").capacity.memory_mb;
            let state = if result.succeeded() && result.peak_mem_mb <= class_memory as f64 {
                TaskState::Complete
            } else {
                TaskState::ExecutorError
            };
            let end = now + to_ticks(result.wall_seconds);
            events.insert((end, EventKind::Completion, id.clone()));
            running.insert(id, Running { result, state, start: now });
            decisions.push(decision);
        }
    }

    let makespan = first_submit.map_or(0, |f| last_event - f);
    let mean_wait = if waits.is_empty() { 0.0 } else { to_seconds(waits.iter().sum()) / waits.len() as f64 };
    Ok(SimulationReport {
        use_profiles: scenario.use_profiles,
        seed: scenario.seed,
        makespan: to_seconds(makespan),
        per_class_busy_seconds: busy.into_iter().map(|(k, v)| (k, to_seconds(v))).collect(),
        per_class_busy_by_origin: by_origin
            .into_iter()
            .map(|(k, m)| (k, m.into_iter().map(|(t, v)| (t, to_seconds(v))).collect()))
            .collect(),
        mean_wait_seconds: mean_wait,
        max_wait_seconds: to_seconds(waits.iter().copied().max().unwrap_or(0)),
        final_states,
        decisions,
        trace: trace.events,
    })
}
