//! Fixtures and trace checks for scheduler simulations.

use std::collections::BTreeMap;

use chrono::Utc;
use hetsched_core::catalog::parse_tool;
use hetsched_core::classifiers::{Family, ModelConfig, ModelParams, Standardizer, TrainedModel, TreeNode};
use hetsched_core::cluster::{load_cluster_spec, ResourceVector};
use hetsched_core::executor::CostModel;
use hetsched_core::monitoring::{JobFilter, StatsStore};
use hetsched_core::profiler::{ExecutionProfile, FeatureKind, FeatureSchema, FeatureSpec};
use hetsched_core::scheduler::{Scenario, SimulationReport, Submission};
use hetsched_core::tasks::{TaskEventKind, TaskState};

pub const CLUSTER: &str = r#"
classes:
  - {name: regular-memory, cost_rank: 1, capacity: {cpu_cores: 4, memory_mb: 4096, disk_mb: 50000}}
  - {name: large-memory, cost_rank: 2, capacity: {cpu_cores: 16, memory_mb: 32768, disk_mb: 200000}}
nodes:
  - {id: reg-1, class: regular-memory}
  - {id: reg-2, class: regular-memory}
  - {id: reg-3, class: regular-memory}
  - {id: big-1, class: large-memory}
"#;

pub const TOOL: &str = r#"
cwlVersion: v1.2
class: CommandLineTool
id: crunch
baseCommand: crunch
inputs:
  n: {type: int, inputBinding: {position: 1}}
outputs: {}
"#;

pub const COSTS: &str = r#"
crunch:
  peak_mem_mb: {intercept: 200, coeffs: {n: 60}}
  cpu_seconds: {intercept: 5, coeffs: {n: 0.7}}
  noise_sigma: 0.1
  failure_rate: 0.05
"#;

// Jobs with n <= 50 are sent to the regular class, the rest to the large one.
pub fn threshold_profile() -> ExecutionProfile {
    ExecutionProfile {
        tool_id: "crunch".into(),
        feature_schema: FeatureSchema { features: vec![FeatureSpec { input: "n".into(), kind: FeatureKind::Numeric }] },
        standardizer: Standardizer { mean: vec![0.0], std: vec![1.0] },
        model: TrainedModel {
            family: Family::Tree,
            hyperparams: ModelConfig::Tree { max_depth: Some(1) },
            params: ModelParams::Tree {
                root: TreeNode::Split {
                    feature: 0,
                    threshold: 50.0,
                    left: Box::new(TreeNode::Leaf { label: "regular-memory".into() }),
                    right: Box::new(TreeNode::Leaf { label: "large-memory".into() }),
                },
            },
        },
        cv_accuracy: 1.0,
        created_at: Utc::now(),
        sample_count: 10,
        degenerate: false,
        grid: Vec::new(),
    }
}

#[derive(Debug, Clone)]
pub struct Job {
    pub at: f64,
    pub n: i64,
    pub request: Option<(u32, u64)>,
}

pub fn scenario(jobs: &[Job], use_profiles: bool, seed: u64, jobs_per_node: u32) -> Scenario {
    let tool = parse_tool(TOOL).unwrap();
    let submissions = jobs
        .iter()
        .map(|j| {
            let mut bindings = serde_json::Map::new();
            bindings.insert("n".into(), j.n.into());
            Submission {
                at_seconds: j.at,
                tool_id: "crunch".into(),
                bindings,
                request: j.request.map(|(cpu, mem)| ResourceVector::new(cpu as f64, mem, 100).unwrap()),
            }
        })
        .collect();
    Scenario {
        cluster: load_cluster_spec(CLUSTER).unwrap(),
        cost_models: CostModel::parse(COSTS).unwrap(),
        tools: BTreeMap::from([(tool.id.clone(), tool)]),
        profiling: Vec::new(),
        submissions,
        use_profiles,
        seed,
        headroom: 1.1,
        jobs_per_node,
    }
}

pub fn check_invariants(s: &Scenario, report: &SimulationReport) {
    let cluster = &s.cluster;
    let demands: BTreeMap<&str, &ResourceVector> =
        report.decisions.iter().map(|d| (d.task_id.as_str(), &d.demand)).collect();
    let mut used: BTreeMap<String, (u64, u64, u64)> = BTreeMap::new();
    let mut suggestion: BTreeMap<String, Option<String>> = BTreeMap::new();
    let mut start: BTreeMap<String, (f64, String)> = BTreeMap::new();
    let mut durations: BTreeMap<String, f64> = BTreeMap::new();

    for e in &report.trace {
        match &e.kind {
            TaskEventKind::Created { suggestion: s, .. } => {
                suggestion.insert(e.task_id.clone(), s.clone());
            }
            TaskEventKind::Transition { to: TaskState::Initializing, node_id, node_class, .. } => {
                let node_id = node_id.as_ref().expect("placed on a node");
                let class = node_class.as_ref().unwrap();
                if let Some(wanted) = &suggestion[&e.task_id] {
                    assert_eq!(wanted, class, "{} ignored its suggestion", e.task_id);
                }
                let node = cluster.node(node_id).unwrap();
                assert_eq!(&node.class_name, class);
                let cap = &cluster.class(class).unwrap().capacity;
                let d = demands[e.task_id.as_str()];
                let u = used.entry(node_id.clone()).or_default();
                u.0 += d.cpu_millis();
                u.1 += d.memory_mb;
                u.2 += d.disk_mb;
                assert!(
                    u.0 <= cap.cpu_millis() && u.1 <= cap.memory_mb && u.2 <= cap.disk_mb,
                    "{node_id} over-allocated at t={}",
                    e.time
                );
            }
            TaskEventKind::Transition { to: TaskState::Running, node_class, .. } => {
                start.insert(e.task_id.clone(), (e.time, node_class.clone().unwrap()));
            }
            TaskEventKind::Transition { to, node_id: Some(node_id), .. } if to.is_terminal() => {
                let d = demands[e.task_id.as_str()];
                let u = used.get_mut(node_id).unwrap();
                u.0 -= d.cpu_millis();
                u.1 -= d.memory_mb;
                u.2 -= d.disk_mb;
                let (t0, class) = start.remove(&e.task_id).unwrap();
                *durations.entry(class).or_insert(0.0) += e.time - t0;
            }
            TaskEventKind::Transition { .. } => {}
        }
    }
    assert!(start.is_empty());
    assert!(used.values().all(|u| *u == (0, 0, 0)));

    for (class, busy) in &report.per_class_busy_seconds {
        assert_eq!(*busy, durations.get(class).copied().unwrap_or(0.0), "class {class}");
        let by_origin: f64 = report.per_class_busy_by_origin.get(class).map_or(0.0, |m| m.values().sum());
        assert_eq!(*busy, by_origin);
    }

    let stats = StatsStore::from_events(&report.trace).unwrap();
    let mut from_report: BTreeMap<String, f64> = BTreeMap::new();
    for rec in stats.job_report(&JobFilter::default()) {
        if let (Some(class), Some(run)) = (&rec.node_class, rec.run_seconds) {
            *from_report.entry(class.clone()).or_insert(0.0) += run;
        }
    }
    for (class, busy) in &report.per_class_busy_seconds {
        assert_eq!(*busy, from_report.get(class).copied().unwrap_or(0.0));
    }
}
