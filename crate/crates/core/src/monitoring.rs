//! Job statistics and cluster-load reports, derived from task events.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterSpec;
use crate::error::{Error, Result};
use crate::executor::Consumption;
use crate::tasks::{TaskEvent, TaskEventKind, TaskState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatRecord {
    pub task_id: String,
    pub tool_id: String,
    pub state: TaskState,
    pub submit_time: f64,
    pub start_time: Option<f64>,
    pub end_time: Option<f64>,
    pub wait_seconds: Option<f64>,
    pub run_seconds: Option<f64>,
    pub node_id: Option<String>,
    pub node_class: Option<String>,
    pub suggestion: Option<String>,
    /// Whether the job ran on the class its profile suggested.
    pub suggestion_used: bool,
    pub consumption: Option<Consumption>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobFilter {
    #[serde(default)]
    pub tool_id: Option<String>,
    #[serde(default)]
    pub state: Option<TaskState>,
    /// Only jobs submitted at or after this time.
    #[serde(default)]
    pub since: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLoad {
    pub node_count: usize,
    pub busy_seconds: f64,
    pub utilization: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueuePoint {
    pub time: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub from: f64,
    pub to: f64,
    pub classes: BTreeMap<String, ClassLoad>,
    pub queue_length: Vec<QueuePoint>,
    /// Tasks reaching each terminal state inside the window.
    pub terminal_counts: BTreeMap<String, usize>,
}

/// Append-only event store with per-job records maintained incrementally.
#[derive(Debug, Clone, Default)]
pub struct StatsStore {
    events: Vec<TaskEvent>,
    records: BTreeMap<String, JobStatRecord>,
}

impl StatsStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a TaskEvent>) -> Result<Self> {
        let mut store = Self::new();
        for e in events {
            store.record_event(e)?;
        }
        Ok(store)
    }

    pub fn events(&self) -> &[TaskEvent] {
        &self.events
    }

    pub fn record(&self, task_id: &str) -> Option<&JobStatRecord> {
        self.records.get(task_id)
    }

    pub fn record_event(&mut self, event: &TaskEvent) -> Result<()> {
        match &event.kind {
            TaskEventKind::Created { jobspec, suggestion } => {
                if self.records.contains_key(&event.task_id) {
                    return Err(Error::DuplicateId(event.task_id.clone()));
                }
                self.records.insert(
                    event.task_id.clone(),
                    JobStatRecord {
                        task_id: event.task_id.clone(),
                        tool_id: jobspec.tool_id.clone(),
                        state: TaskState::Queued,
                        submit_time: event.time,
                        start_time: None,
                        end_time: None,
                        wait_seconds: None,
                        run_seconds: None,
                        node_id: None,
                        node_class: None,
                        suggestion: suggestion.clone(),
                        suggestion_used: false,
                        consumption: None,
                    },
                );
            }
            TaskEventKind::Transition { to, node_id, node_class, consumption, .. } => {
                let rec = self.records.get_mut(&event.task_id).ok_or_else(|| Error::UnknownTask(event.task_id.clone()))?;
                if !rec.state.can_transition_to(*to) {
                    return Err(Error::IllegalTransition { task: rec.task_id.clone(), from: rec.state, to: *to });
                }
                rec.state = *to;
                if node_id.is_some() {
                    rec.node_id.clone_from(node_id);
                }
                if node_class.is_some() {
                    rec.node_class.clone_from(node_class);
                    rec.suggestion_used = rec.suggestion.is_some() && rec.suggestion == rec.node_class;
                }
                if *to == TaskState::Running {
                    rec.start_time = Some(event.time);
                    rec.wait_seconds = Some(event.time - rec.submit_time);
                }
                if to.is_terminal() {
                    rec.end_time = Some(event.time);
                    rec.run_seconds = rec.start_time.map(|s| event.time - s);
                    if consumption.is_some() {
                        rec.consumption = *consumption;
                    }
                }
            }
        }
        self.events.push(event.clone());
        Ok(())
    }

    /// Matching jobs ordered by submit time, then task id.
    pub fn job_report(&self, filter: &JobFilter) -> Vec<JobStatRecord> {
        let mut out: Vec<JobStatRecord> = self
            .records
            .values()
            .filter(|r| filter.tool_id.as_ref().is_none_or(|t| &r.tool_id == t))
            .filter(|r| filter.state.is_none_or(|s| r.state == s))
            .filter(|r| filter.since.is_none_or(|s| r.submit_time >= s))
            .cloned()
            .collect();
        out.sort_by(|a, b| a.submit_time.total_cmp(&b.submit_time).then_with(|| a.task_id.cmp(&b.task_id)));
        out
    }

    /// Per-class utilization over `[from, to)`: the union of each node's
    /// busy intervals clipped to the window, divided by node count × window
    /// length. Tasks still running are busy until `to`.
    pub fn cluster_load_report(&self, from: f64, to: f64, cluster: &ClusterSpec) -> Result<LoadReport> {
        if !(to > from) {
            return Err(Error::EmptyWindow);
        }
        let mut per_node: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for r in self.records.values() {
            let (Some(node), Some(start)) = (&r.node_id, r.start_time) else { continue };
            let end = r.end_time.unwrap_or(to);
            let (s, e) = (start.max(from), end.min(to));
            if e > s {
                per_node.entry(node.as_str()).or_default().push((s, e));
            }
        }

        let mut classes: BTreeMap<String, ClassLoad> = cluster
            .classes
            .iter()
            .map(|c| (c.name.clone(), ClassLoad { node_count: cluster.node_count(&c.name), busy_seconds: 0.0, utilization: 0.0 }))
            .collect();
        for node in &cluster.nodes {
            let Some(mut intervals) = per_node.remove(node.id.as_str()) else { continue };
            intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut busy = 0.0;
            let mut current: Option<(f64, f64)> = None;
            for (s, e) in intervals {
                current = match current {
                    Some((cs, ce)) if s <= ce => Some((cs, ce.max(e))),
                    Some((cs, ce)) => {
                        busy += ce - cs;
                        Some((s, e))
                    }
                    None => Some((s, e)),
                };
            }
            if let Some((cs, ce)) = current {
                busy += ce - cs;
            }
            if let Some(c) = classes.get_mut(&node.class_name) {
                c.busy_seconds += busy;
            }
        }
        let window = to - from;
        for c in classes.values_mut() {
            if c.node_count > 0 {
                c.utilization = (c.busy_seconds / (c.node_count as f64 * window)).clamp(0.0, 1.0);
            }
        }

        let mut ordered: Vec<&TaskEvent> = self.events.iter().collect();
        ordered.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.seq.cmp(&b.seq)));
        let mut queued: BTreeSet<&str> = BTreeSet::new();
        let mut queue_length: Vec<QueuePoint> = Vec::new();
        let mut before_window = 0;
        let mut terminal_counts: BTreeMap<String, usize> = BTreeMap::new();
        for e in ordered {
            match &e.kind {
                TaskEventKind::Created { .. } => {
                    queued.insert(&e.task_id);
                }
                TaskEventKind::Transition { to: state, .. } => {
                    queued.remove(e.task_id.as_str());
                    if state.is_terminal() && e.time >= from && e.time < to {
                        *terminal_counts.entry(state.to_string()).or_insert(0) += 1;
                    }
                }
            }
            if e.time < from {
                before_window = queued.len();
            } else if e.time <= to {
                match queue_length.last_mut() {
                    Some(p) if p.time == e.time => p.length = queued.len(),
                    _ => queue_length.push(QueuePoint { time: e.time, length: queued.len() }),
                }
            }
        }
        if queue_length.first().is_none_or(|p| p.time > from) {
            queue_length.insert(0, QueuePoint { time: from, length: before_window });
        }

        Ok(LoadReport { from, to, classes, queue_length, terminal_counts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Bindings;
    use crate::cluster::load_cluster_spec;
    use crate::tasks::JobSpec;

    const CLUSTER: &str = r#"
classes:
  - {name: regular-memory, cost_rank: 1, capacity: {cpu_cores: 4, memory_mb: 4096, disk_mb: 1000}}
  - {name: large-memory, cost_rank: 2, capacity: {cpu_cores: 8, memory_mb: 32768, disk_mb: 1000}}
nodes:
  - {id: reg-1, class: regular-memory}
  - {id: reg-2, class: regular-memory}
  - {id: big-1, class: large-memory}
"#;

    struct Log {
        events: Vec<TaskEvent>,
    }

    impl Log {
        fn created(&mut self, t: f64, id: &str, tool: &str, suggestion: Option<&str>) {
            let seq = self.events.len() as u64 + 1;
            self.events.push(TaskEvent {
                seq,
                time: t,
                task_id: id.into(),
                kind: TaskEventKind::Created {
                    jobspec: JobSpec::new(tool, Bindings::new()),
                    suggestion: suggestion.map(str::to_string),
                },
            });
        }

        fn to(&mut self, t: f64, id: &str, state: TaskState, node: Option<(&str, &str)>) {
            let mut e = TaskEvent::transition(self.events.len() as u64 + 1, t, id, state);
            if let TaskEventKind::Transition { node_id, node_class, .. } = &mut e.kind {
                *node_id = node.map(|n| n.0.to_string());
                *node_class = node.map(|n| n.1.to_string());
            }
            self.events.push(e);
        }

        fn run(&mut self, id: &str, node: (&str, &str), start: f64, end: f64, last: TaskState) {
            self.to(start, id, TaskState::Initializing, Some(node));
            self.to(start, id, TaskState::Running, Some(node));
            self.to(end, id, last, Some(node));
        }
    }

    #[test]
    fn records_follow_events() {
        let mut log = Log { events: vec![] };
        log.created(0.0, "a", "tool", Some("regular-memory"));
        log.run("a", ("reg-1", "regular-memory"), 4.0, 10.0, TaskState::Complete);
        let stats = StatsStore::from_events(&log.events).unwrap();
        let r = stats.record("a").unwrap();
        assert_eq!(r.wait_seconds, Some(4.0));
        assert_eq!(r.run_seconds, Some(6.0));
        assert!(r.suggestion_used);

        let mut frozen = stats.clone();
        let late = TaskEvent::transition(99, 11.0, "a", TaskState::Running);
        assert!(matches!(frozen.record_event(&late), Err(Error::IllegalTransition { .. })));
        let unknown = TaskEvent::transition(100, 1.0, "zzz", TaskState::Running);
        assert!(matches!(frozen.record_event(&unknown), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn job_report_filters() {
        let mut log = Log { events: vec![] };
        log.created(0.0, "a", "x", None);
        log.created(1.0, "b", "y", None);
        log.created(2.0, "c", "x", None);
        log.run("a", ("reg-1", "regular-memory"), 0.0, 1.0, TaskState::Complete);
        log.run("b", ("reg-2", "regular-memory"), 1.0, 2.0, TaskState::Complete);
        let stats = StatsStore::from_events(&log.events).unwrap();
        assert!(StatsStore::new().job_report(&JobFilter::default()).is_empty());
        let done = stats.job_report(&JobFilter { state: Some(TaskState::Complete), ..Default::default() });
        assert_eq!(done.len(), 2);
        let xs = stats.job_report(&JobFilter { tool_id: Some("x".into()), ..Default::default() });
        assert_eq!(xs.iter().map(|r| r.task_id.as_str()).collect::<Vec<_>>(), ["a", "c"]);
        assert!(stats.job_report(&JobFilter { since: Some(50.0), ..Default::default() }).is_empty());
    }

    #[test]
    fn load_clipping_and_utilization() {
        let cluster = load_cluster_spec(CLUSTER).unwrap();
        let mut log = Log { events: vec![] };
        log.created(0.0, "full", "t", None);
        log.run("full", ("big-1", "large-memory"), 0.0, 100.0, TaskState::Complete);
        log.created(0.0, "half", "t", None);
        // Runs 40..60; the window 50..100 sees exactly 10 of its 20 seconds.
        log.run("half", ("reg-1", "regular-memory"), 40.0, 60.0, TaskState::Complete);
        let stats = StatsStore::from_events(&log.events).unwrap();
        let report = stats.cluster_load_report(50.0, 100.0, &cluster).unwrap();
        assert_eq!(report.classes["large-memory"].utilization, 1.0);
        assert_eq!(report.classes["regular-memory"].busy_seconds, 10.0);
        assert_eq!(report.classes["regular-memory"].utilization, 0.1);
        assert_eq!(report.terminal_counts["COMPLETE"], 1);

        let idle = StatsStore::new().cluster_load_report(0.0, 10.0, &cluster).unwrap();
        assert!(idle.classes.values().all(|c| c.utilization == 0.0));
        assert_eq!(idle.queue_length, vec![QueuePoint { time: 0.0, length: 0 }]);
        assert!(matches!(stats.cluster_load_report(5.0, 5.0, &cluster), Err(Error::EmptyWindow)));
    }

    #[test]
    fn overlapping_jobs_on_one_node_count_once() {
        let cluster = load_cluster_spec(CLUSTER).unwrap();
        let mut log = Log { events: vec![] };
        log.created(0.0, "a", "t", None);
        log.created(0.0, "b", "t", None);
        log.run("a", ("reg-1", "regular-memory"), 0.0, 6.0, TaskState::Complete);
        log.run("b", ("reg-1", "regular-memory"), 2.0, 8.0, TaskState::Complete);
        let stats = StatsStore::from_events(&log.events).unwrap();
        let report = stats.cluster_load_report(0.0, 10.0, &cluster).unwrap();
        assert_eq!(report.classes["regular-memory"].busy_seconds, 8.0);
        assert_eq!(report.queue_length[0], QueuePoint { time: 0.0, length: 1 });
    }
}
