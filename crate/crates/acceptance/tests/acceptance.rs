//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hetsched_core::catalog::{parse_tool, Bindings, FileRef, ParamValue, ToolDescriptor, Visibility};
use hetsched_core::classifiers::{
    fit_knn, fit_tree, loss_and_gradient, predict_knn, predict_tree, Dataset, SoftmaxParams,
};
use hetsched_core::cluster::load_cluster_spec;
use hetsched_core::executor::{run_simulated, CostModel, OutputFile, SimulatedRunner};
use hetsched_core::monitoring::{JobFilter, StatsStore};
use hetsched_core::packager::{build_crate, validate_crate, write_crate, PackageOptions, METADATA_FILE};
use hetsched_core::profiler::{label_for, profile_tool, ProfileStore, ProfilingOptions, ProfilingRequest, DEFAULT_HEADROOM};
use hetsched_core::rng::SplitMix64;
use hetsched_core::scheduler::{run_simulation, Scenario, SimulationReport};
use hetsched_core::tasks::{JobSpec, TaskEvent, TaskEventKind, TaskLogs, TaskRecord, TaskState, TaskStore};
use hetsched_core::workflow::{parse_workflow, plan};
use hetsched_core::Error;
use hetsched_repo::mock::{Faults, MockRepository};
use hetsched_repo::{md5_hex, DepositMetadata, RepoClient, RepoError, RepositoryConfig};
use hetsched_server::{ExecutionMode, RunRequest, Service, ServiceConfig, TaskRequest};
use serde_json::{json, Value};

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;
#[path = "../../core/tests/invariants/mod.rs"]
mod invariants;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const MIB: u64 = 1 << 20;

// Golden makespans for the demo scenario, pinned after the first verified run.
const DEMO_MAKESPAN_WITH_PROFILES: f64 = 705.103515625;
const DEMO_MAKESPAN_WITHOUT_PROFILES: f64 = 759.7841796875;

const CLASSES: &str = r#"
classes:
  - {name: regular-memory, cost_rank: 1, capacity: {cpu_cores: 4, memory_mb: 4096, disk_mb: 200000}}
  - {name: large-memory, cost_rank: 2, capacity: {cpu_cores: 16, memory_mb: 32768, disk_mb: 200000}}
nodes:
  - {id: big-1, class: large-memory}
  - {id: reg-1, class: regular-memory}
  - {id: reg-2, class: regular-memory}
"#;

const ALIGN: &str = r#"
cwlVersion: v1.2
class: CommandLineTool
id: align
version: "1.0"
baseCommand: align
inputs:
  reads: {type: File, inputBinding: {position: 1}}
outputs:
  bam: {type: File, outputBinding: {glob: out.bam}}
"#;

const ALIGN_COSTS: &str = r#"
align:
  peak_mem_mb: {intercept: 100, coeffs: {reads: 1.5}}
  cpu_seconds: {intercept: 5, coeffs: {reads: 0.02}}
  noise_sigma: 0.05
"#;

const WORDCOUNT: &str = r#"
cwlVersion: v1.2
class: CommandLineTool
id: wordcount
version: "1.0"
label: Word count
baseCommand: wc
hints:
  DockerRequirement: {dockerPull: "registry.local/wc:1.0"}
inputs:
  reads: {type: File?, inputBinding: {position: 2}}
  lines: {type: int, default: 1, inputBinding: {prefix: -n}}
  mode: {type: string, default: fast}
outputs:
  counts: {type: File, outputBinding: {glob: counts.txt}}
"#;

const STAGE: &str = r#"
cwlVersion: v1.2
class: CommandLineTool
id: stage
baseCommand: stage
inputs:
  src: File?
  other: File?
  k: int?
outputs:
  out: {type: File, outputBinding: {glob: "*.out"}}
"#;

const SERVICE_COSTS: &str = r#"
wordcount:
  peak_mem_mb: {intercept: 50, coeffs: {reads: 1.5}}
  cpu_seconds: {intercept: 2}
  output_size_mb: {intercept: 0.001}
stage:
  peak_mem_mb: {intercept: 100}
  cpu_seconds: {intercept: 1}
  output_size_mb: {intercept: 0.001}
"#;

const DIAMOND: &str = r#"
cwlVersion: v1.2
class: Workflow
id: diamond
inputs:
  k: int
outputs:
  final: {type: File, outputSource: D/out}
steps:
  A: {run: stage, in: {k: k}, out: [out]}
  B: {run: stage, in: {src: A/out}, out: [out]}
  C: {run: stage, in: {src: A/out}, out: [out]}
  D: {run: stage, in: {src: B/out, other: C/out}, out: [out]}
"#;

fn file_binding(mib: u64) -> Value {
    json!({ "class": "File", "path": format!("reads-{mib}.fq"), "size": mib * MIB })
}

fn demo_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/demo.yaml")
}

/// Runs the demo scenario with and without profiles.
fn demo_reports() -> Result<(SimulationReport, SimulationReport), Error> {
    let mut scenario = Scenario::load(&demo_path())?;
    let profiles = scenario.train_profiles()?;
    scenario.use_profiles = true;
    let with = run_simulation(&scenario, &profiles)?;
    scenario.use_profiles = false;
    let without = run_simulation(&scenario, &ProfileStore::in_memory())?;
    Ok((with, without))
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let tool = parse_tool(ALIGN).map_err(|e| e.to_string())?;
    let model = CostModel::parse(ALIGN_COSTS).map_err(|e| e.to_string())?;
    let cluster = load_cluster_spec(CLASSES).map_err(|e| e.to_string())?;
    let sizes: Vec<u64> = (0..60).map(|i| (100.0 + i as f64 * (20000.0 - 100.0) / 59.0).round() as u64).collect();
    let request = ProfilingRequest {
        tool_id: "align".into(),
        alternatives: BTreeMap::from([("reads".to_string(), sizes.iter().map(|&s| file_binding(s)).collect())]),
        max_runs: 500,
        seed: 11,
    };
    let runner = SimulatedRunner::new(model.clone(), [tool.clone()]);
    let (profile, dataset) =
        profile_tool(&request, &tool, &runner, &cluster.classes, ProfilingOptions::default(), None).map_err(|e| e.to_string())?;
    ensure!(profile.cv_accuracy >= 0.95, "cv accuracy {} < 0.95", profile.cv_accuracy);

    // Held-out sizes stay below the point where nothing can host the job.
    let mut noiseless = model.clone();
    noiseless.tools.get_mut("align").unwrap().noise_sigma = 0.0;
    let mut rng = SplitMix64::new(2024);
    let mut hits = 0;
    for i in 0..20 {
        let mib = 100 + rng.next_below(19_400);
        let mut bindings = Bindings::new();
        bindings.insert("reads".into(), ParamValue::File(FileRef::with_size(format!("held-{i}"), mib * MIB)));
        let job = JobSpec::new("align", bindings.clone());
        let truth = run_simulated(&format!("held-{i}"), &job, &tool, &noiseless, 0, None).map_err(|e| e.to_string())?;
        let expected = label_for(&truth.consumption(), &cluster.classes, DEFAULT_HEADROOM).map(|c| c.name.clone());
        let predicted = profile.predict(&tool, &bindings).map_err(|e| e.to_string())?;
        if expected.as_deref() == Some(predicted.as_str()) {
            hits += 1;
        }
    }
    ensure!(hits >= 18, "only {hits}/20 held-out bindings match the labeling rule");
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!(
        "cv accuracy {:.3} ({} samples), held-out {hits}/20, {:.2}s",
        profile.cv_accuracy,
        dataset.samples.len(),
        elapsed.as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let (with, without) = demo_reports().map_err(|e| e.to_string())?;
    let misplaced = with
        .per_class_busy_by_origin
        .get("large-memory")
        .and_then(|m| m.get("regular-memory"))
        .copied()
        .unwrap_or(0.0);
    ensure!(misplaced == 0.0, "{misplaced} large-node seconds went to regular-labeled jobs");
    ensure!(with.makespan < without.makespan, "makespan {} is not below {}", with.makespan, without.makespan);
    ensure!(with.makespan == DEMO_MAKESPAN_WITH_PROFILES, "makespan with profiles drifted to {}", with.makespan);
    ensure!(without.makespan == DEMO_MAKESPAN_WITHOUT_PROFILES, "makespan without profiles drifted to {}", without.makespan);
    let spill = without.per_class_busy_by_origin["large-memory"].get("regular-memory").copied().unwrap_or(0.0);
    Ok(format!(
        "makespan {} s with profiles vs {} s without; {spill} s of regular work on the large node without",
        with.makespan, without.makespan
    ))
}

fn labeled_rows(rng: &mut SplitMix64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<String>) {
    let x = (0..n).map(|_| (0..d).map(|_| rng.next_below(5) as f64).collect()).collect();
    let y = (0..n).map(|_| ["a", "b", "c"][rng.next_below(3) as usize].to_string()).collect();
    (x, y)
}

fn criterion_3() -> Outcome {
    let mut rng = SplitMix64::new(3);
    let mut knn_checked = 0;
    for _ in 0..20 {
        let (x, y) = labeled_rows(&mut rng, 15, 3);
        let data = Dataset::new(x.clone(), y.clone()).map_err(|e| e.to_string())?;
        let k = 1 + rng.next_below(7) as usize;
        let model = fit_knn(&data, k).map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let q: Vec<f64> = (0..3).map(|_| rng.next_below(11) as f64 / 2.0 - 0.5).collect();
            let got = predict_knn(&model, &q);
            let want = oracles::knn_oracle(&x, &y, k, &q);
            ensure!(got == want, "kNN k={k} query {q:?}: {got} vs oracle {want}");
            knn_checked += 1;
        }
    }

    for instance in 0..50 {
        let n = 1 + rng.next_below(8) as usize;
        let d = 1 + rng.next_below(3) as usize;
        let (x, y) = labeled_rows(&mut rng, n, d);
        let data = Dataset::new(x.clone(), y.clone()).map_err(|e| e.to_string())?;
        let depth = [None, Some(1), Some(2), Some(3)][instance % 4];
        let model = fit_tree(&data, depth, 2).map_err(|e| e.to_string())?;
        let labels: Vec<&str> = y.iter().map(String::as_str).collect();
        let oracle = oracles::tree_oracle(&x, &labels, 0, depth);
        for _ in 0..40 {
            let q: Vec<f64> = (0..d).map(|_| rng.next_below(13) as f64 / 2.0 - 1.0).collect();
            let got = predict_tree(&model, &q);
            let want = oracles::oracle_predict(&oracle, &q);
            ensure!(got == want, "tree instance {instance} query {q:?}: {got} vs oracle {want}");
        }
    }

    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut r = SplitMix64::new(seed);
        let x: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| r.next_f64() * 4.0 - 2.0).collect()).collect();
        let t: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let params = SoftmaxParams {
            weights: (0..3).map(|_| (0..3).map(|_| r.next_f64() - 0.5).collect()).collect(),
            biases: (0..3).map(|_| r.next_f64() - 0.5).collect(),
        };
        for lambda in [0.0, 0.1, 1.0] {
            let (_, grad) = loss_and_gradient(&params, &x, &t, lambda);
            let mut probe = |analytic: f64, bump: &dyn Fn(&mut SoftmaxParams, f64)| {
                let (mut p, mut m) = (params.clone(), params.clone());
                bump(&mut p, eps);
                bump(&mut m, -eps);
                let numeric =
                    (loss_and_gradient(&p, &x, &t, lambda).0 - loss_and_gradient(&m, &x, &t, lambda).0) / (2.0 * eps);
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
            };
            for c in 0..3 {
                for j in 0..3 {
                    probe(grad.weights[c][j], &|s, e| s.weights[c][j] += e);
                }
                probe(grad.biases[c], &|s, e| s.biases[c] += e);
            }
        }
    }
    ensure!(worst < 1e-4, "logistic gradient relative error {worst}");
    Ok(format!("{knn_checked} kNN queries and 50 trees match their oracles; max gradient error {worst:.2e}"))
}

fn criterion_4() -> Outcome {
    let mut rng = SplitMix64::new(4);
    let profiles = ProfileStore::in_memory();
    profiles.insert(invariants::threshold_profile()).map_err(|e| e.to_string())?;
    let mut min_events = usize::MAX;
    for round in 0..8u64 {
        let jobs: Vec<invariants::Job> = (0..300)
            .map(|_| invariants::Job {
                at: rng.next_below(20_000) as f64 / 10.0,
                n: 1 + rng.next_below(499) as i64,
                request: (rng.next_below(2) == 0).then(|| (1 + rng.next_below(7) as u32, 256 + rng.next_below(40_000))),
            })
            .collect();
        let s = invariants::scenario(&jobs, round % 2 == 0, rng.next_u64(), 1 + (round % 3) as u32);
        let a = run_simulation(&s, &profiles).map_err(|e| e.to_string())?;
        min_events = min_events.min(a.trace.len());
        ensure!(a.trace.len() >= 1000, "round {round}: only {} events", a.trace.len());
        invariants::check_invariants(&s, &a);
        let b = run_simulation(&s, &profiles).map_err(|e| e.to_string())?;
        ensure!(a.trace_jsonl() == b.trace_jsonl(), "round {round}: traces differ for the same seed");
    }
    Ok(format!("8 simulations of >= {min_events} events: no over-allocation, suggestions honored, busy time reconciles, traces reproducible"))
}

// The legal edges, written out independently of the implementation.
const LEGAL: [(TaskState, TaskState); 9] = [
    (TaskState::Queued, TaskState::Initializing),
    (TaskState::Queued, TaskState::Canceled),
    (TaskState::Initializing, TaskState::Running),
    (TaskState::Initializing, TaskState::SystemError),
    (TaskState::Initializing, TaskState::Canceled),
    (TaskState::Running, TaskState::Complete),
    (TaskState::Running, TaskState::ExecutorError),
    (TaskState::Running, TaskState::SystemError),
    (TaskState::Running, TaskState::Canceled),
];

fn service_config(state: &Path, time_scale: f64) -> ServiceConfig {
    let mode = ExecutionMode::Simulated { cost_models: CostModel::parse(SERVICE_COSTS).unwrap(), time_scale };
    ServiceConfig::new(state, load_cluster_spec(CLASSES).unwrap(), mode)
}

async fn start_service(state: &Path, time_scale: f64) -> Service {
    let service = Service::start(service_config(state, time_scale)).await.unwrap();
    for doc in [WORDCOUNT, STAGE] {
        service.catalog().register(parse_tool(doc).unwrap(), Visibility::Public).unwrap();
    }
    service
}

async fn wait_for(service: &Service, id: &str, done: impl Fn(TaskState) -> bool) -> TaskState {
    for _ in 0..1000 {
        if let Some(t) = service.task(id).filter(|t| done(t.state)) {
            return t.state;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("{id} stuck in {:?}", service.task(id).map(|t| t.state));
}

fn wordcount_request(dir: &Path, i: usize) -> TaskRequest {
    let input = dir.join(format!("reads-{i}.txt"));
    std::fs::write(&input, format!("line {i}\n")).unwrap();
    let mut bindings = serde_json::Map::new();
    bindings.insert("reads".into(), json!({ "class": "File", "path": input, "size": 300 }));
    TaskRequest { tool_id: "wordcount".into(), bindings, ..Default::default() }
}

async fn criterion_5() -> Outcome {
    let mut rng = SplitMix64::new(5);
    let mut store = TaskStore::new();
    let ids: Vec<String> = (0..40).map(|i| format!("task-{i:02}")).collect();
    let mut seq = 0;
    for id in &ids {
        seq += 1;
        let created =
            TaskEvent { seq, time: 0.0, task_id: id.clone(), kind: TaskEventKind::Created { jobspec: JobSpec::new("t", Bindings::new()), suggestion: None } };
        store.apply(&created).map_err(|e| e.to_string())?;
    }
    let (mut illegal, mut legal) = (0, 0);
    for _ in 0..5000 {
        let id = &ids[rng.next_below(ids.len() as u64) as usize];
        let to = TaskState::ALL[rng.next_below(7) as usize];
        let from = store.get(id).unwrap().state;
        seq += 1;
        let event = TaskEvent::transition(seq, seq as f64, id.clone(), to);
        let allowed = LEGAL.contains(&(from, to));
        match store.apply(&event) {
            Ok(()) => {
                ensure!(allowed, "{from} -> {to} was accepted");
                legal += 1;
            }
            Err(Error::IllegalTransition { .. }) => {
                ensure!(!allowed, "{from} -> {to} was rejected");
                ensure!(store.get(id).unwrap().state == from, "rejected event changed {id}");
                illegal += 1;
            }
            Err(e) => return Err(format!("unexpected error {e}")),
        }
    }

    let dir = tempfile::tempdir().unwrap();
    // Real-time pacing keeps tasks queued long enough to cancel one.
    let service = start_service(dir.path(), 1.0).await;
    let (addr, _) = service.spawn(SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    let mut created = BTreeSet::new();
    for i in 0..50 {
        created.insert(service.create_task(wordcount_request(dir.path(), i)).await.map_err(|e| e.to_string())?);
    }
    let victim = created.iter().last().unwrap().clone();
    let first = service.cancel_task(&victim).await.map_err(|e| e.to_string())?;
    let second = service.cancel_task(&victim).await.map_err(|e| e.to_string())?;
    ensure!(first == TaskState::Canceled && second == first, "cancel returned {first} then {second}");

    let http = reqwest::Client::new();
    let mut seen = Vec::new();
    let mut token: Option<String> = None;
    let mut pages = 0;
    loop {
        let mut url = format!("http://{addr}/v1/tasks?page_size=7");
        if let Some(t) = &token {
            url.push_str(&format!("&page_token={t}"));
        }
        let page: Value = http.get(url).send().await.map_err(|e| e.to_string())?.json().await.map_err(|e| e.to_string())?;
        pages += 1;
        for t in page["tasks"].as_array().unwrap() {
            seen.push(t["id"].as_str().unwrap().to_string());
        }
        match page["next_page_token"].as_str() {
            Some(t) => token = Some(t.to_string()),
            None => break,
        }
        ensure!(pages < 100, "pagination does not terminate");
    }
    let unique: BTreeSet<String> = seen.iter().cloned().collect();
    ensure!(seen.len() == 50 && unique == created, "pages returned {} ids, {} distinct", seen.len(), unique.len());
    Ok(format!(
        "{illegal} illegal transitions rejected, {legal} legal accepted; cancel idempotent ({first}); 50 tasks over {pages} pages"
    ))
}

fn topo_check(rng: &mut SplitMix64, n: usize) -> Outcome {
    let stage = parse_tool(STAGE).unwrap();
    let resolver = |_: &str| Some(stage.clone());
    let mut names: Vec<String> = (0..n).map(|i| format!("s{:02}", (i * 7 + 3) % 97)).collect();
    rng.shuffle(&mut names);
    let mut doc = String::from("cwlVersion: v1.2\nclass: Workflow\nid: random\ninputs: {}\noutputs: {}\nsteps:\n");
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut parents = BTreeSet::new();
        if i > 0 {
            for _ in 0..rng.next_below(3) {
                parents.insert(rng.next_below(i as u64) as usize);
            }
        }
        let ins: Vec<String> =
            parents.iter().zip(["src", "other"]).map(|(p, slot)| format!("{slot}: {}/out", names[*p])).collect();
        for p in parents.iter().take(2) {
            edges.insert((names[*p].clone(), names[i].clone()));
        }
        doc.push_str(&format!("  {}: {{run: stage, in: {{{}}}, out: [out]}}\n", names[i], ins.join(", ")));
    }
    let p = plan(&parse_workflow(&doc).map_err(|e| e.to_string())?, &resolver).map_err(|e| e.to_string())?;
    ensure!(p.topo_order.len() == n, "order has {} of {n} steps", p.topo_order.len());
    let pos = |s: &str| p.topo_order.iter().position(|t| t == s).unwrap();
    for (a, b) in &edges {
        ensure!(pos(a) < pos(b), "{a} must precede {b}");
    }
    Ok(String::new())
}

async fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let service = start_service(dir.path(), 0.0).await;
    let mut bindings = serde_json::Map::new();
    bindings.insert("k".into(), json!(3));
    let run_id = service
        .create_run(RunRequest { workflow: DIAMOND.into(), bindings })
        .await
        .map_err(|e| e.to_string())?;
    let mut run = None;
    for _ in 0..1000 {
        run = service.run(&run_id);
        if run.as_ref().is_some_and(|r| serde_json::to_value(&r.state).unwrap() == "COMPLETE") {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let run = serde_json::to_value(run.unwrap()).unwrap();
    ensure!(run["state"] == "COMPLETE", "run ended as {}", run["state"]);
    let task_of = |s: &str| run["steps"][s]["task_id"].as_str().unwrap_or_default().to_string();
    let events = service.events();
    let created: Vec<&TaskEvent> = events.iter().filter(|e| matches!(e.kind, TaskEventKind::Created { .. })).collect();
    ensure!(created.len() == 4, "{} tasks created", created.len());
    let seq_where = |task: &str, pred: &dyn Fn(&TaskEventKind) -> bool| {
        events.iter().find(|e| e.task_id == task && pred(&e.kind)).map(|e| e.seq).unwrap_or(u64::MAX)
    };
    let completed = |k: &TaskEventKind| matches!(k, TaskEventKind::Transition { to: TaskState::Complete, .. });
    let running = |k: &TaskEventKind| matches!(k, TaskEventKind::Transition { to: TaskState::Running, .. });
    let d_start = seq_where(&task_of("D"), &running);
    ensure!(
        seq_where(&task_of("B"), &completed) < d_start && seq_where(&task_of("C"), &completed) < d_start,
        "D started before B and C completed"
    );

    let stage = parse_tool(STAGE).unwrap();
    let resolver = |_: &str| Some(stage.clone());
    let cyclic = DIAMOND.replace("in: {k: k}", "in: {k: k, other: D/out}");
    match plan(&parse_workflow(&cyclic).map_err(|e| e.to_string())?, &resolver) {
        Err(Error::Cycle(member)) => ensure!(["A", "B", "C", "D"].contains(&member.as_str()), "named `{member}`"),
        other => return Err(format!("cyclic workflow planned: {other:?}")),
    }

    let mut rng = SplitMix64::new(6);
    for i in 0..100 {
        let n = 1 + rng.next_below(20) as usize;
        topo_check(&mut rng, n).map_err(|e| format!("DAG {i}: {e}"))?;
    }
    Ok("diamond ran as 4 tasks with D after B and C; cycle rejected; 100 random DAGs ordered".into())
}

fn golden_task(dir: &Path) -> TaskRecord {
    let output = dir.join("counts.txt");
    std::fs::write(&output, "3 3 14\n").unwrap();
    let mut bindings = Bindings::new();
    bindings.insert("lines".into(), ParamValue::Int(10));
    bindings.insert("mode".into(), ParamValue::String("exact".into()));
    let mut jobspec = JobSpec::new("wordcount", bindings);
    jobspec.version = Some("1.0".into());
    TaskRecord {
        id: "01HZX3K4Q5R6S7T8V9W0XYZABC".into(),
        state: TaskState::Complete,
        creation_time: 1_700_000_000.0,
        jobspec,
        suggestion: Some("regular-memory".into()),
        logs: TaskLogs {
            node_id: Some("reg-1".into()),
            node_class: Some("regular-memory".into()),
            start_time: Some(1_700_000_001.25),
            end_time: Some(1_700_000_042.5),
            exit_status: Some(0),
            consumption: None,
        },
        outputs: vec![OutputFile { id: "counts".into(), path: output.display().to_string(), size_bytes: 7 }],
    }
}

async fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let service = start_service(dir.path(), 0.0).await;
    let mut ids = Vec::new();
    for i in 0..5 {
        ids.push(service.create_task(wordcount_request(dir.path(), i)).await.map_err(|e| e.to_string())?);
    }
    let mut bindings = serde_json::Map::new();
    bindings.insert("k".into(), json!(1));
    service.create_run(RunRequest { workflow: DIAMOND.into(), bindings }).await.map_err(|e| e.to_string())?;
    for id in &ids {
        wait_for(&service, id, TaskState::is_terminal).await;
    }
    for _ in 0..1000 {
        let v = service.events();
        let done = v.iter().filter(|e| matches!(e.kind, TaskEventKind::Transition { to: TaskState::Complete, .. })).count();
        if done >= 9 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let mut packaged = 0;
    let task_ids: BTreeSet<String> = service.events().iter().map(|e| e.task_id.clone()).collect();
    for id in &task_ids {
        let task = service.task(id).unwrap();
        if task.state != TaskState::Complete {
            continue;
        }
        let tool = service.catalog().resolve(&task.jobspec.tool_ref()).unwrap();
        let pkg = build_crate(&task, &tool, &PackageOptions::default()).map_err(|e| e.to_string())?;
        let out = dir.path().join("crates").join(id);
        write_crate(&pkg, &out).map_err(|e| e.to_string())?;
        let report = validate_crate(&out);
        ensure!(report.is_valid(), "task {id}: {:?}", report.failures);
        packaged += 1;
    }
    ensure!(packaged >= 9, "only {packaged} COMPLETE tasks to package");

    let tool: ToolDescriptor = parse_tool(WORDCOUNT).unwrap();
    let task = golden_task(dir.path());
    let options = PackageOptions { doi: Some("10.5072/zenodo.1234".into()), author: Some("A. Researcher".into()) };
    let pkg = build_crate(&task, &tool, &options).map_err(|e| e.to_string())?;
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/wordcount-crate.json");
    let bytes = pkg.metadata_bytes();
    if std::env::var_os("HETSCHED_BLESS").is_some() {
        std::fs::write(&golden_path, &bytes).unwrap();
    }
    let golden = std::fs::read(&golden_path).map_err(|e| format!("{}: {e}", golden_path.display()))?;
    ensure!(bytes == golden, "metadata differs from {}", golden_path.display());

    let out = dir.path().join("golden-crate");
    write_crate(&pkg, &out).map_err(|e| e.to_string())?;
    ensure!(validate_crate(&out).is_valid(), "golden crate invalid");
    std::fs::remove_file(out.join("outputs/counts.txt")).unwrap();
    let report = validate_crate(&out);
    ensure!(
        report.failures.iter().any(|f| f.contains("outputs/counts.txt")),
        "deleted output not named: {:?}",
        report.failures
    );
    ensure!(out.join(METADATA_FILE).exists(), "metadata file vanished");
    Ok(format!("{packaged} COMPLETE tasks packaged and valid; golden metadata matches; dangling file named"))
}

async fn criterion_8() -> Outcome {
    let mock = MockRepository::start("s3cret").await.map_err(|e| e.to_string())?;
    let payload: Vec<u8> = (0..64 * 1024).map(|i| (i % 251) as u8).collect();
    mock.add_record("42", "reads", &[("reads.fq", payload.as_slice())]);
    let fast = |c: RepositoryConfig| RepositoryConfig { retry_delays: vec![Duration::from_millis(5); 3], ..c };
    let anon = RepoClient::new(fast(RepositoryConfig::new("mock", mock.base_url()))).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();

    let record = anon.fetch_record("42").await.map_err(|e| e.to_string())?;
    ensure!(record.files[0].checksum.ends_with(&md5_hex(&payload)), "listed checksum {}", record.files[0].checksum);
    let path = anon.download_file(&record, "reads.fq", dir.path()).await.map_err(|e| e.to_string())?;
    ensure!(std::fs::read(&path).unwrap() == payload, "downloaded bytes differ");
    std::fs::remove_file(&path).unwrap();

    mock.set_faults(Faults { corrupt_downloads: true, ..Default::default() });
    let corrupt = anon.download_file(&record, "reads.fq", dir.path()).await;
    ensure!(matches!(corrupt, Err(RepoError::ChecksumMismatch { .. })), "corrupt download: {corrupt:?}");
    ensure!(!dir.path().join("reads.fq").exists(), "corrupt file left behind");

    mock.set_faults(Faults { abort_downloads_after: Some(1000), ..Default::default() });
    let aborted = anon.download_file(&record, "reads.fq", dir.path()).await;
    ensure!(aborted.is_err(), "aborted download succeeded");
    ensure!(!dir.path().join("reads.fq").exists(), "partial file left behind");
    let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
    ensure!(leftovers == 0, "{leftovers} temporary files left behind");
    mock.set_faults(Faults::default());

    let upload = dir.path().join("result.txt");
    std::fs::write(&upload, "42\n").unwrap();
    let meta = DepositMetadata { title: "outputs".into(), description: String::new(), creators: vec!["A. Researcher".into()] };
    let denied = anon.create_deposit(&meta).await;
    ensure!(matches!(denied, Err(RepoError::Auth)), "write without token: {denied:?}");

    let client = RepoClient::new(fast(RepositoryConfig::new("mock", mock.base_url()).with_token("s3cret"))).map_err(|e| e.to_string())?;
    let handle = client.create_deposit(&meta).await.map_err(|e| e.to_string())?;
    let handle = client.upload_file(&handle, &upload).await.map_err(|e| e.to_string())?;
    let published = client.publish(&handle).await.map_err(|e| e.to_string())?;
    ensure!(published.doi.as_deref() == Some("10.5072/mock.1"), "doi {:?}", published.doi);
    Ok("checksummed download; no file left after corruption or abort; deposit published as 10.5072/mock.1; 401 without token".into())
}

fn criterion_9() -> Outcome {
    let (with, without) = demo_reports().map_err(|e| e.to_string())?;
    for report in [&with, &without] {
        let stats = StatsStore::from_events(&report.trace).map_err(|e| e.to_string())?;
        let mut by_class: BTreeMap<String, f64> = BTreeMap::new();
        for rec in stats.job_report(&JobFilter::default()) {
            if let (Some(class), Some(run)) = (rec.node_class, rec.run_seconds) {
                *by_class.entry(class).or_insert(0.0) += run;
            }
        }
        for (class, busy) in &report.per_class_busy_seconds {
            let got = by_class.get(class).copied().unwrap_or(0.0);
            ensure!(got == *busy, "profiles={}: class {class} job report {got} vs simulator {busy}", report.use_profiles);
        }
    }
    Ok(format!("per-class run seconds reconcile exactly: {:?}", with.per_class_busy_seconds))
}

fn main() {
    let runtime = tokio::runtime::Runtime::new().expect("runtime");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("profiling pipeline end to end", Box::new(criterion_1)),
        ("profiles keep light jobs off the large node", Box::new(criterion_2)),
        ("classifier oracles", Box::new(criterion_3)),
        ("scheduler invariants", Box::new(criterion_4)),
        ("task state machine", Box::new(|| runtime.block_on(criterion_5()))),
        ("workflow engine", Box::new(|| runtime.block_on(criterion_6()))),
        ("RO-Crate packaging", Box::new(|| runtime.block_on(criterion_7()))),
        ("repository connector", Box::new(|| runtime.block_on(criterion_8()))),
        ("monitoring reconciliation", Box::new(criterion_9)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
