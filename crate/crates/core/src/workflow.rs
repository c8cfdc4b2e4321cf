//! CWL-subset workflows: parsing, DAG planning, and per-run step tracking.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use serde_yaml::Value as Yaml;

use crate::catalog::{
    check_header, doc_id, entries, get_str, parse_input, split_tool_ref, Bindings, FileRef, InputParameter,
    ParamValue, ToolDescriptor,
};
use crate::error::{Error, Result};
use crate::executor::OutputFile;
use crate::tasks::{JobSpec, TaskState};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source {
    Step { step: String, output: String },
    Input(String),
}

impl Source {
    pub fn parse(raw: &str) -> Source {
        let raw = raw.trim_start_matches('#');
        match raw.split_once('/') {
            Some((step, output)) => Source::Step { step: step.to_string(), output: output.to_string() },
            None => Source::Input(raw.to_string()),
        }
    }
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Step { step, output } => write!(f, "{step}/{output}"),
            Source::Input(id) => f.write_str(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowOutput {
    pub id: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowStep {
    pub id: String,
    /// Tool reference, `id` or `id@version`.
    pub run: String,
    /// Step input id → source.
    pub inputs: BTreeMap<String, String>,
    pub out: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowDescriptor {
    pub id: String,
    pub inputs: Vec<InputParameter>,
    pub outputs: Vec<WorkflowOutput>,
    pub steps: Vec<WorkflowStep>,
}

impl WorkflowDescriptor {
    pub fn step(&self, id: &str) -> Option<&WorkflowStep> {
        self.steps.iter().find(|s| s.id == id)
    }

    fn check_source(&self, consumer: &str, raw: &str) -> Result<()> {
        let ok = match Source::parse(raw) {
            Source::Input(id) => self.inputs.iter().any(|i| i.id == id),
            Source::Step { step, output } => self.step(&step).is_some_and(|s| s.out.contains(&output)),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::UnresolvedSource { step: consumer.to_string(), source_ref: raw.to_string() })
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for step in &self.steps {
            if !seen.insert(step.id.as_str()) {
                return Err(Error::DuplicateId(format!("step `{}`", step.id)));
            }
        }
        let mut seen = HashSet::new();
        for input in &self.inputs {
            if !seen.insert(input.id.as_str()) {
                return Err(Error::DuplicateId(format!("input `{}`", input.id)));
            }
        }
        for step in &self.steps {
            for source in step.inputs.values() {
                self.check_source(&step.id, source)?;
            }
        }
        for output in &self.outputs {
            self.check_source(&output.id, &output.source)?;
        }
        Ok(())
    }

    /// Type-checks workflow-level bindings and applies defaults.
    pub fn resolve_bindings(&self, bindings: &Bindings) -> Result<Bindings> {
        if let Some(unknown) = bindings.keys().find(|k| !self.inputs.iter().any(|i| &i.id == *k)) {
            return Err(Error::UnknownInput(unknown.clone()));
        }
        let mut out = Bindings::new();
        for input in &self.inputs {
            match bindings.get(&input.id).or(input.default.as_ref()) {
                Some(v) if v.matches(&input.param_type) => {
                    out.insert(input.id.clone(), v.clone());
                }
                Some(v) => {
                    return Err(Error::TypeMismatch {
                        input: input.id.clone(),
                        message: format!("expected {}, got {}", input.param_type, v.to_arg()),
                    })
                }
                None if input.required => return Err(Error::MissingRequiredInput(input.id.clone())),
                None => {}
            }
        }
        Ok(out)
    }

    /// Builds the job for `step_id` from resolved workflow bindings and the
    /// outputs of completed steps (keyed `step/output`).
    pub fn instantiate_step(
        &self,
        step_id: &str,
        completed_outputs: &BTreeMap<String, FileRef>,
        workflow_bindings: &Bindings,
    ) -> Result<JobSpec> {
        let step = self.step(step_id).ok_or_else(|| Error::NotFound(format!("step `{step_id}`")))?;
        let mut bindings = Bindings::new();
        for (input, raw) in &step.inputs {
            match Source::parse(raw) {
                Source::Input(id) => {
                    if let Some(v) = workflow_bindings.get(&id) {
                        bindings.insert(input.clone(), v.clone());
                    }
                }
                source @ Source::Step { .. } => {
                    let key = source.to_string();
                    let file = completed_outputs.get(&key).ok_or(Error::MissingUpstream(key))?;
                    bindings.insert(input.clone(), ParamValue::File(file.clone()));
                }
            }
        }
        let (tool_id, version) = split_tool_ref(&step.run);
        let mut job = JobSpec::new(tool_id, bindings);
        job.version = version.map(str::to_string);
        job.tags.insert("workflow".into(), self.id.clone());
        job.tags.insert("step".into(), step.id.clone());
        Ok(job)
    }
}

/// Parses a CWL-subset `Workflow` document (YAML or JSON).
pub fn parse_workflow(text: &str) -> Result<WorkflowDescriptor> {
    let doc: Yaml = crate::parse_document(text)?;
    let map = doc.as_mapping().ok_or_else(|| Error::invalid("document is not a mapping"))?;
    check_header(map, "Workflow")?;
    let id = doc_id(map)?;

    let inputs = entries(map.get("inputs"), "inputs")?
        .into_iter()
        .map(|(input_id, body)| parse_input(input_id, body))
        .collect::<Result<Vec<_>>>()?;

    let mut outputs = Vec::new();
    for (output_id, body) in entries(map.get("outputs"), "outputs")? {
        let source = body
            .as_mapping()
            .and_then(|m| get_str(m, "outputSource"))
            .ok_or_else(|| Error::invalid(format!("workflow output `{output_id}` needs outputSource")))?;
        outputs.push(WorkflowOutput { id: output_id, source: source.trim_start_matches('#').to_string() });
    }

    let mut steps = Vec::new();
    let mut seen = HashSet::new();
    for (step_id, body) in entries(map.get("steps"), "steps")? {
        if !seen.insert(step_id.clone()) {
            return Err(Error::DuplicateId(format!("step `{step_id}`")));
        }
        let body = body.as_mapping().ok_or_else(|| Error::invalid(format!("step `{step_id}` is not a mapping")))?;
        let run = get_str(body, "run")
            .ok_or_else(|| Error::invalid(format!("step `{step_id}` needs `run` naming a registered tool")))?
            .trim_start_matches('#')
            .to_string();
        let mut step_inputs = BTreeMap::new();
        for (input_id, source) in entries(body.get("in"), "in")? {
            let source = match source {
                Yaml::String(s) => s.as_str(),
                Yaml::Mapping(m) => get_str(m, "source")
                    .ok_or_else(|| Error::invalid(format!("step `{step_id}` input `{input_id}` needs a source")))?,
                _ => return Err(Error::invalid(format!("step `{step_id}` input `{input_id}` has no usable source"))),
            };
            step_inputs.insert(input_id, source.trim_start_matches('#').to_string());
        }
        let out = match body.get("out") {
            None | Some(Yaml::Null) => Vec::new(),
            Some(Yaml::Sequence(items)) => items
                .iter()
                .map(|item| match item {
                    Yaml::String(s) => Ok(s.clone()),
                    Yaml::Mapping(m) => get_str(m, "id")
                        .map(str::to_string)
                        .ok_or_else(|| Error::invalid(format!("step `{step_id}` out entry needs an id"))),
                    _ => Err(Error::invalid(format!("step `{step_id}` has a malformed out list"))),
                })
                .collect::<Result<Vec<_>>>()?,
            Some(_) => return Err(Error::invalid(format!("step `{step_id}`: `out` must be a list"))),
        };
        steps.push(WorkflowStep { id: step_id, run, inputs: step_inputs, out });
    }

    let wf = WorkflowDescriptor { id, inputs, outputs, steps };
    wf.validate()?;
    Ok(wf)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagPlan {
    /// `(producer, consumer)` pairs.
    pub edges: BTreeSet<(String, String)>,
    pub topo_order: Vec<String>,
}

impl DagPlan {
    pub fn predecessors<'a>(&'a self, step: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges.iter().filter(move |(_, c)| c == step).map(|(p, _)| p.as_str())
    }
}

/// Orders the steps with Kahn's algorithm, taking ready steps in
/// lexicographic id order. Tool references are resolved and each step's
/// inputs and outputs are checked against its tool.
pub fn plan(workflow: &WorkflowDescriptor, resolver: &dyn Fn(&str) -> Option<ToolDescriptor>) -> Result<DagPlan> {
    for step in &workflow.steps {
        let tool = resolver(&step.run).ok_or_else(|| Error::UnresolvedTool(step.run.clone()))?;
        if let Some(unknown) = step.inputs.keys().find(|k| tool.input(k).is_none()) {
            return Err(Error::UnknownInput(format!("{}/{unknown}", step.id)));
        }
        if let Some(missing) = step.out.iter().find(|o| !tool.outputs.iter().any(|t| &t.id == *o)) {
            return Err(Error::invalid(format!("step `{}` lists output `{missing}` that tool `{}` does not declare", step.id, tool.id)));
        }
    }

    let mut edges = BTreeSet::new();
    for step in &workflow.steps {
        for raw in step.inputs.values() {
            if let Source::Step { step: producer, .. } = Source::parse(raw) {
                edges.insert((producer, step.id.clone()));
            }
        }
    }

    let mut indegree: BTreeMap<&str, usize> = workflow.steps.iter().map(|s| (s.id.as_str(), 0)).collect();
    for (_, consumer) in &edges {
        *indegree.get_mut(consumer.as_str()).expect("validated step") += 1;
    }
    let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(s, _)| *s).collect();
    let mut topo_order = Vec::with_capacity(workflow.steps.len());
    while let Some(next) = ready.pop_first() {
        topo_order.push(next.to_string());
        for (_, consumer) in edges.iter().filter(|(p, _)| p == next) {
            let d = indegree.get_mut(consumer.as_str()).expect("validated step");
            *d -= 1;
            if *d == 0 {
                ready.insert(consumer);
            }
        }
    }

    if topo_order.len() < workflow.steps.len() {
        let placed: HashSet<&str> = topo_order.iter().map(String::as_str).collect();
        let remaining: BTreeSet<&str> =
            workflow.steps.iter().map(|s| s.id.as_str()).filter(|s| !placed.contains(s)).collect();
        return Err(Error::Cycle(cycle_member(&edges, &remaining)));
    }
    Ok(DagPlan { edges, topo_order })
}

/// Walks predecessors inside the unplaced set until a step repeats; that
/// step lies on a cycle.
fn cycle_member(edges: &BTreeSet<(String, String)>, remaining: &BTreeSet<&str>) -> String {
    let mut current = *remaining.first().expect("non-empty remainder");
    let mut visited = HashSet::new();
    while visited.insert(current) {
        current = edges
            .iter()
            .find(|(p, c)| c == current && remaining.contains(p.as_str()))
            .map(|(p, _)| p.as_str())
            .expect("every unplaced step has an unplaced predecessor");
    }
    current.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStatus {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    /// `None` until the step's task is created.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<TaskState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub workflow_id: String,
    pub state: TaskState,
    pub steps: BTreeMap<String, StepStatus>,
    pub bindings: Bindings,
    #[serde(default)]
    pub outputs: BTreeMap<String, FileRef>,
}

/// Tracks one workflow run: which steps are ready, and the aggregate state.
///
/// The run is COMPLETE once every step is; the first failing step makes it
/// EXECUTOR_ERROR and every step not yet running is canceled.
#[derive(Debug, Clone)]
pub struct RunTracker {
    pub record: RunRecord,
    workflow: WorkflowDescriptor,
    plan: DagPlan,
    completed: BTreeMap<String, FileRef>,
}

impl RunTracker {
    pub fn new(id: impl Into<String>, workflow: WorkflowDescriptor, plan: DagPlan, bindings: &Bindings) -> Result<Self> {
        let bindings = workflow.resolve_bindings(bindings)?;
        let steps = plan.topo_order.iter().map(|s| (s.clone(), StepStatus { task_id: None, state: None })).collect();
        let record = RunRecord {
            id: id.into(),
            workflow_id: workflow.id.clone(),
            state: if plan.topo_order.is_empty() { TaskState::Complete } else { TaskState::Queued },
            steps,
            bindings,
            outputs: BTreeMap::new(),
        };
        Ok(Self { record, workflow, plan, completed: BTreeMap::new() })
    }

    pub fn workflow(&self) -> &WorkflowDescriptor {
        &self.workflow
    }

    /// Unsubmitted steps whose producers have all completed, in plan order.
    pub fn ready_steps(&self) -> Vec<String> {
        if self.record.state.is_terminal() {
            return Vec::new();
        }
        self.plan
            .topo_order
            .iter()
            .filter(|s| self.record.steps[*s].task_id.is_none() && self.record.steps[*s].state.is_none())
            .filter(|s| {
                self.plan.predecessors(s).all(|p| self.record.steps[p].state == Some(TaskState::Complete))
            })
            .cloned()
            .collect()
    }

    pub fn job_for(&self, step_id: &str) -> Result<JobSpec> {
        self.workflow.instantiate_step(step_id, &self.completed, &self.record.bindings)
    }

    pub fn mark_submitted(&mut self, step_id: &str, task_id: &str) {
        if let Some(s) = self.record.steps.get_mut(step_id) {
            s.task_id = Some(task_id.to_string());
            s.state = Some(TaskState::Queued);
        }
        self.refresh_state();
    }

    pub fn step_for_task(&self, task_id: &str) -> Option<&str> {
        self.record.steps.iter().find(|(_, s)| s.task_id.as_deref() == Some(task_id)).map(|(k, _)| k.as_str())
    }

    /// Applies a task state change. Returns ids of tasks that should be
    /// canceled because the run failed.
    pub fn on_task_update(&mut self, task_id: &str, state: TaskState, outputs: &[OutputFile]) -> Vec<String> {
        let Some(step_id) = self.step_for_task(task_id).map(str::to_string) else { return Vec::new() };
        self.record.steps.get_mut(&step_id).expect("known step").state = Some(state);
        if state == TaskState::Complete {
            for o in outputs {
                self.completed.insert(format!("{step_id}/{}", o.id), FileRef::with_size(o.path.clone(), o.size_bytes));
            }
        }
        let mut to_cancel = Vec::new();
        if matches!(state, TaskState::ExecutorError | TaskState::SystemError) {
            for status in self.record.steps.values_mut() {
                match status.state {
                    None => status.state = Some(TaskState::Canceled),
                    Some(TaskState::Queued) => {
                        if let Some(t) = &status.task_id {
                            to_cancel.push(t.clone());
                        }
                    }
                    _ => {}
                }
            }
        }
        self.refresh_state();
        to_cancel
    }

    fn refresh_state(&mut self) {
        if self.record.state.is_terminal() {
            return;
        }
        let states: Vec<Option<TaskState>> = self.record.steps.values().map(|s| s.state).collect();
        let next = if states.iter().any(|s| matches!(s, Some(TaskState::ExecutorError | TaskState::SystemError))) {
            TaskState::ExecutorError
        } else if states.iter().all(|s| *s == Some(TaskState::Complete)) {
            TaskState::Complete
        } else if states.contains(&Some(TaskState::Canceled)) {
            TaskState::Canceled
        } else if states.iter().any(|s| matches!(s, Some(TaskState::Initializing | TaskState::Running | TaskState::Complete))) {
            TaskState::Running
        } else {
            TaskState::Queued
        };
        self.record.state = next;
        if next == TaskState::Complete {
            for output in &self.workflow.outputs {
                if let Some(f) = self.completed.get(&output.source) {
                    self.record.outputs.insert(output.id.clone(), f.clone());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::parse_tool;

    const TOOL: &str = r#"
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

    fn resolver(r: &str) -> Option<ToolDescriptor> {
        (split_tool_ref(r).0 == "stage").then(|| parse_tool(TOOL).unwrap())
    }

    const DIAMOND: &str = r#"
cwlVersion: v1.2
class: Workflow
id: diamond
inputs:
  k: int
outputs:
  final: {type: File, outputSource: D/out}
steps:
  D:
    run: stage
    in: {src: B/out, other: C/out}
    out: [out]
  C:
    run: stage
    in: {src: A/out}
    out: [out]
  B:
    run: stage
    in: {src: {source: A/out}, k: k}
    out: [out]
  A:
    run: stage
    in: {k: k}
    out: [out]
"#;

    #[test]
    fn diamond_plan() {
        let wf = parse_workflow(DIAMOND).unwrap();
        assert_eq!(wf.steps.len(), 4);
        let p = plan(&wf, &resolver).unwrap();
        assert_eq!(p.topo_order, ["A", "B", "C", "D"]);
        assert_eq!(p.edges.len(), 4);
    }

    #[test]
    fn single_step_has_no_edges() {
        let text = "cwlVersion: v1.2\nclass: Workflow\nid: one\ninputs: {k: int}\noutputs: {}\nsteps:\n  only: {run: stage, in: {k: k}, out: [out]}\n";
        let wf = parse_workflow(text).unwrap();
        let p = plan(&wf, &resolver).unwrap();
        assert!(p.edges.is_empty());
        let mut b = Bindings::new();
        b.insert("k".into(), ParamValue::Int(3));
        let job = wf.instantiate_step("only", &BTreeMap::new(), &b).unwrap();
        assert_eq!(job.bindings.get("k"), Some(&ParamValue::Int(3)));
        assert_eq!(job.tool_id, "stage");
    }

    #[test]
    fn parse_errors() {
        let bad = DIAMOND.replace("src: A/out}", "src: missing/out}");
        assert!(matches!(parse_workflow(&bad), Err(Error::UnresolvedSource { step, .. }) if step == "C"));
        let tool_doc = TOOL;
        assert!(matches!(parse_workflow(tool_doc), Err(Error::UnknownDocumentClass(c)) if c == "CommandLineTool"));
        let dup = "cwlVersion: v1.2\nclass: Workflow\nid: d\ninputs: {}\noutputs: {}\nsteps:\n  - {id: a, run: stage, in: {}, out: []}\n  - {id: a, run: stage, in: {}, out: []}\n";
        assert!(matches!(parse_workflow(dup), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn cycles_and_unresolved_tools() {
        let self_loop = "cwlVersion: v1.2\nclass: Workflow\nid: s\ninputs: {}\noutputs: {}\nsteps:\n  X: {run: stage, in: {src: X/out}, out: [out]}\n";
        let wf = parse_workflow(self_loop).unwrap();
        assert!(matches!(plan(&wf, &resolver), Err(Error::Cycle(m)) if m == "X"));

        let two = "cwlVersion: v1.2\nclass: Workflow\nid: s\ninputs: {}\noutputs: {}\nsteps:\n  P: {run: stage, in: {src: Q/out}, out: [out]}\n  Q: {run: stage, in: {src: P/out}, out: [out]}\n  R: {run: stage, in: {}, out: [out]}\n";
        let wf = parse_workflow(two).unwrap();
        assert!(matches!(plan(&wf, &resolver), Err(Error::Cycle(m)) if m == "P" || m == "Q"));

        let unknown = "cwlVersion: v1.2\nclass: Workflow\nid: u\ninputs: {}\noutputs: {}\nsteps:\n  A: {run: nope, in: {}, out: []}\n";
        assert!(matches!(plan(&parse_workflow(unknown).unwrap(), &resolver), Err(Error::UnresolvedTool(_))));

        let empty = "cwlVersion: v1.2\nclass: Workflow\nid: e\ninputs: {}\noutputs: {}\nsteps: {}\n";
        assert_eq!(plan(&parse_workflow(empty).unwrap(), &resolver).unwrap(), DagPlan::default());
    }

    #[test]
    fn missing_upstream() {
        let wf = parse_workflow(DIAMOND).unwrap();
        let mut b = Bindings::new();
        b.insert("k".into(), ParamValue::Int(1));
        assert!(matches!(wf.instantiate_step("B", &BTreeMap::new(), &b), Err(Error::MissingUpstream(s)) if s == "A/out"));
        let mut done = BTreeMap::new();
        done.insert("A/out".to_string(), FileRef::with_size("/data/a.out", 10));
        let job = wf.instantiate_step("B", &done, &b).unwrap();
        assert_eq!(job.bindings.len(), 2);
        assert!(matches!(job.bindings.get("src"), Some(ParamValue::File(f)) if f.path == "/data/a.out"));
    }

    fn out(id: &str) -> Vec<OutputFile> {
        vec![OutputFile { id: "out".into(), path: format!("/w/{id}.out"), size_bytes: 1 }]
    }

    #[test]
    fn tracker_releases_steps_in_order() {
        let wf = parse_workflow(DIAMOND).unwrap();
        let p = plan(&wf, &resolver).unwrap();
        let mut b = Bindings::new();
        b.insert("k".into(), ParamValue::Int(1));
        let mut t = RunTracker::new("run-1", wf, p, &b).unwrap();
        assert_eq!(t.ready_steps(), ["A"]);
        t.mark_submitted("A", "tA");
        assert!(t.ready_steps().is_empty());
        t.on_task_update("tA", TaskState::Complete, &out("a"));
        assert_eq!(t.ready_steps(), ["B", "C"]);
        t.mark_submitted("B", "tB");
        t.mark_submitted("C", "tC");
        t.on_task_update("tB", TaskState::Complete, &out("b"));
        assert!(t.ready_steps().is_empty(), "D must wait for C");
        t.on_task_update("tC", TaskState::Complete, &out("c"));
        assert_eq!(t.ready_steps(), ["D"]);
        let job = t.job_for("D").unwrap();
        assert_eq!(job.bindings.len(), 2);
        t.mark_submitted("D", "tD");
        assert_eq!(t.record.state, TaskState::Running);
        t.on_task_update("tD", TaskState::Complete, &out("d"));
        assert_eq!(t.record.state, TaskState::Complete);
        assert_eq!(t.record.outputs["final"].path, "/w/d.out");
    }

    #[test]
    fn tracker_fails_fast() {
        let wf = parse_workflow(DIAMOND).unwrap();
        let p = plan(&wf, &resolver).unwrap();
        let mut b = Bindings::new();
        b.insert("k".into(), ParamValue::Int(1));
        let mut t = RunTracker::new("run-2", wf, p, &b).unwrap();
        t.mark_submitted("A", "tA");
        t.on_task_update("tA", TaskState::Complete, &out("a"));
        t.mark_submitted("B", "tB");
        t.mark_submitted("C", "tC");
        t.on_task_update("tB", TaskState::Running, &[]);
        let cancel = t.on_task_update("tB", TaskState::ExecutorError, &[]);
        assert_eq!(cancel, ["tC"]);
        assert_eq!(t.record.state, TaskState::ExecutorError);
        assert_eq!(t.record.steps["D"].state, Some(TaskState::Canceled));
        assert!(t.ready_steps().is_empty());
    }
}
