//! RO-Crate 1.1 experiment packages for completed tasks.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::catalog::{ParamValue, ToolDescriptor};
use crate::error::{Error, Result};
use crate::tasks::{TaskRecord, TaskState};

pub const METADATA_FILE: &str = "ro-crate-metadata.json";
pub const PARAMETERS_FILE: &str = "parameters.json";
pub const CRATE_CONTEXT: &str = "https://w3id.org/ro/crate/1.1/context";
pub const CRATE_PROFILE: &str = "https://w3id.org/ro/crate/1.1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PackageOptions {
    #[serde(default)]
    pub doi: Option<String>,
    #[serde(default)]
    pub author: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadFile {
    pub source: PathBuf,
    /// Path inside the crate, e.g. `outputs/result.txt`.
    pub target: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPackage {
    pub task_id: String,
    pub graph: Vec<Value>,
    pub payload: Vec<PayloadFile>,
    /// Contents of `parameters.json`.
    pub parameters: String,
}

impl ExperimentPackage {
    /// The JSON-LD metadata document.
    pub fn metadata(&self) -> Value {
        json!({ "@context": CRATE_CONTEXT, "@graph": self.graph })
    }

    pub fn metadata_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(&self.metadata()).expect("metadata serializes");
        bytes.push(b'\n');
        bytes
    }
}

fn iso_time(seconds: f64) -> String {
    let nanos = (seconds * 1e9).round() as i64;
    DateTime::<Utc>::from_timestamp_nanos(nanos).to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn file_name(path: &str) -> String {
    Path::new(path).file_name().map_or_else(|| path.to_string(), |n| n.to_string_lossy().into_owned())
}

fn reference(id: &str) -> Value {
    json!({ "@id": id })
}

fn payload_for(source: &str, dir: &str, hint: &str, taken: &mut BTreeSet<String>) -> Result<PayloadFile> {
    let path = PathBuf::from(source);
    let meta = fs::metadata(&path).map_err(|_| Error::MissingPayload(path.clone()))?;
    if !meta.is_file() {
        return Err(Error::MissingPayload(path));
    }
    let mut target = format!("{dir}/{}", file_name(source));
    if !taken.insert(target.clone()) {
        target = format!("{dir}/{hint}-{}", file_name(source));
        taken.insert(target.clone());
    }
    Ok(PayloadFile { source: path, target, size: meta.len() })
}

fn file_entity(target: &str, name: &str, size: u64) -> Value {
    json!({ "@id": target, "@type": "File", "name": name, "contentSize": size.to_string() })
}

/// Builds the crate for a COMPLETE task: root dataset, metadata descriptor,
/// a CreateAction linking the tool to its input files, parameters and output
/// files, and optional author and publication entities.
pub fn build_crate(task: &TaskRecord, descriptor: &ToolDescriptor, options: &PackageOptions) -> Result<ExperimentPackage> {
    if task.state != TaskState::Complete {
        return Err(Error::TaskNotComplete { task: task.id.clone(), state: task.state });
    }
    let mut taken = BTreeSet::new();
    let mut payload = Vec::new();
    let mut inputs = Vec::new();
    for input in &descriptor.inputs {
        if let Some(ParamValue::File(f)) = task.jobspec.bindings.get(&input.id) {
            let p = payload_for(&f.path, "inputs", &input.id, &mut taken)?;
            inputs.push(p.target.clone());
            payload.push(p);
        }
    }
    let mut outputs = Vec::new();
    for out in &task.outputs {
        let p = payload_for(&out.path, "outputs", &out.id, &mut taken)?;
        outputs.push(p.target.clone());
        payload.push(p);
    }
    let mut parameters = serde_json::to_string_pretty(&task.jobspec.bindings)?;
    parameters.push('\n');

    let software_id = format!("#software-{}", descriptor.reference());
    let action_id = format!("#run-{}", task.id);
    let doi_id = options.doi.as_ref().map(|d| format!("https://doi.org/{d}"));

    let mut has_part: Vec<Value> = payload.iter().map(|p| reference(&p.target)).collect();
    has_part.push(reference(PARAMETERS_FILE));

    let mut root = Map::new();
    root.insert("@id".into(), json!("./"));
    root.insert("@type".into(), json!("Dataset"));
    root.insert("name".into(), json!(format!("Execution of {} (task {})", descriptor.reference(), task.id)));
    root.insert("description".into(), json!(format!("Inputs, configuration and outputs of task {}", task.id)));
    root.insert("hasPart".into(), Value::Array(has_part));
    root.insert("mentions".into(), reference(&action_id));
    if let Some(end) = task.logs.end_time {
        root.insert("datePublished".into(), json!(iso_time(end)));
    }
    if let Some(doi) = &doi_id {
        root.insert("citation".into(), reference(doi));
    }
    if options.author.is_some() {
        root.insert("author".into(), reference("#author"));
    }

    let mut object: Vec<Value> = inputs.iter().map(|t| reference(t)).collect();
    object.push(reference(PARAMETERS_FILE));
    let mut action = Map::new();
    action.insert("@id".into(), json!(action_id));
    action.insert("@type".into(), json!("CreateAction"));
    action.insert("name".into(), json!(format!("Run of {}", descriptor.reference())));
    action.insert("instrument".into(), reference(&software_id));
    action.insert("object".into(), Value::Array(object));
    action.insert("result".into(), Value::Array(outputs.iter().map(|t| reference(t)).collect()));
    action.insert("actionStatus".into(), json!("http://schema.org/CompletedActionStatus"));
    if let Some(start) = task.logs.start_time {
        action.insert("startTime".into(), json!(iso_time(start)));
    }
    if let Some(end) = task.logs.end_time {
        action.insert("endTime".into(), json!(iso_time(end)));
    }
    if !descriptor.image_ref.is_empty() {
        action.insert("containerImage".into(), reference("#container-image"));
    }
    if options.author.is_some() {
        action.insert("agent".into(), reference("#author"));
    }

    let mut software = Map::new();
    software.insert("@id".into(), json!(software_id));
    software.insert("@type".into(), json!("SoftwareApplication"));
    software.insert("name".into(), json!(descriptor.label.clone().unwrap_or_else(|| descriptor.id.clone())));
    software.insert("identifier".into(), json!(descriptor.id));
    software.insert("softwareVersion".into(), json!(descriptor.version));

    let mut graph = vec![
        json!({
            "@id": METADATA_FILE,
            "@type": "CreativeWork",
            "conformsTo": reference(CRATE_PROFILE),
            "about": reference("./"),
        }),
        Value::Object(root),
        Value::Object(action),
        Value::Object(software),
    ];
    if !descriptor.image_ref.is_empty() {
        graph.push(json!({ "@id": "#container-image", "@type": "ContainerImage", "name": descriptor.image_ref }));
    }
    for p in &payload {
        graph.push(file_entity(&p.target, &file_name(&p.target), p.size));
    }
    let mut params = file_entity(PARAMETERS_FILE, "Input parameters", parameters.len() as u64);
    params["encodingFormat"] = json!("application/json");
    graph.push(params);
    if let (Some(doi), Some(id)) = (&options.doi, &doi_id) {
        graph.push(json!({ "@id": id, "@type": "CreativeWork", "identifier": doi, "name": format!("Publication {doi}") }));
    }
    if let Some(author) = &options.author {
        graph.push(json!({ "@id": "#author", "@type": "Person", "name": author }));
    }

    Ok(ExperimentPackage { task_id: task.id.clone(), graph, payload, parameters })
}

/// Writes the crate into `dir` and returns the written paths, relative to
/// `dir`. Rewriting the same package produces identical bytes.
pub fn write_crate(package: &ExperimentPackage, dir: &Path) -> Result<Vec<String>> {
    for p in &package.payload {
        if !p.source.is_file() {
            return Err(Error::MissingPayload(p.source.clone()));
        }
    }
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    for p in &package.payload {
        let target = dir.join(&p.target);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        let same = fs::canonicalize(&p.source).ok().zip(fs::canonicalize(&target).ok()).is_some_and(|(a, b)| a == b);
        if !same {
            fs::copy(&p.source, &target)?;
        }
        manifest.push(p.target.clone());
    }
    fs::write(dir.join(PARAMETERS_FILE), &package.parameters)?;
    manifest.push(PARAMETERS_FILE.to_string());
    fs::write(dir.join(METADATA_FILE), package.metadata_bytes())?;
    manifest.push(METADATA_FILE.to_string());
    Ok(manifest)
}

/// Writes the crate to `dir` and keeps a copy under
/// `<state_dir>/crates/<task_id>/`.
pub fn write_and_store(package: &ExperimentPackage, dir: &Path, state_dir: &Path) -> Result<Vec<String>> {
    let manifest = write_crate(package, dir)?;
    let stored = state_dir.join("crates").join(&package.task_id);
    if fs::canonicalize(dir).ok() != fs::canonicalize(&stored).ok() || !stored.exists() {
        write_crate(package, &stored)?;
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.failures.is_empty()
    }
}

fn has_type(entity: &Value, ty: &str) -> bool {
    match entity.get("@type") {
        Some(Value::String(s)) => s == ty,
        Some(Value::Array(items)) => items.iter().any(|t| t.as_str() == Some(ty)),
        _ => false,
    }
}

fn id_of(entity: &Value) -> Option<&str> {
    entity.get("@id").and_then(Value::as_str)
}

/// Checks a crate directory and lists every problem found.
pub fn validate_crate(dir: &Path) -> ValidationReport {
    let mut failures = Vec::new();
    let text = match fs::read_to_string(dir.join(METADATA_FILE)) {
        Ok(t) => t,
        Err(_) => {
            return ValidationReport { failures: vec![format!("metadata file {METADATA_FILE} is missing")] };
        }
    };
    let doc: Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => return ValidationReport { failures: vec![format!("metadata is not valid JSON: {e}")] },
    };
    if doc.get("@context").and_then(Value::as_str) != Some(CRATE_CONTEXT) {
        failures.push(format!("@context is not {CRATE_CONTEXT}"));
    }
    let graph = doc.get("@graph").and_then(Value::as_array).cloned().unwrap_or_default();
    if graph.is_empty() {
        failures.push("@graph is missing or empty".into());
    }
    let ids: BTreeSet<&str> = graph.iter().filter_map(id_of).collect();

    let roots = graph.iter().filter(|e| id_of(e) == Some("./") && has_type(e, "Dataset")).count();
    if roots != 1 {
        failures.push(format!("expected exactly one root Dataset \"./\", found {roots}"));
    }
    match graph.iter().find(|e| id_of(e) == Some(METADATA_FILE)) {
        None => failures.push("metadata descriptor entity is missing".into()),
        Some(d) => {
            if d.pointer("/conformsTo/@id").and_then(Value::as_str) != Some(CRATE_PROFILE) {
                failures.push(format!("metadata descriptor does not conform to {CRATE_PROFILE}"));
            }
        }
    }
    for entity in graph.iter().filter(|e| has_type(e, "File")) {
        let Some(id) = id_of(entity) else {
            failures.push("File entity without @id".into());
            continue;
        };
        match fs::metadata(dir.join(id)) {
            Err(_) => failures.push(format!("dangling File entity `{id}`: file is missing")),
            Ok(meta) => {
                let declared = entity.get("contentSize").and_then(|v| match v {
                    Value::String(s) => s.parse::<u64>().ok(),
                    other => other.as_u64(),
                });
                if let Some(size) = declared.filter(|s| *s != meta.len()) {
                    failures.push(format!("File entity `{id}` declares {size} bytes but the file has {}", meta.len()));
                }
            }
        }
    }
    let actions: Vec<&Value> = graph.iter().filter(|e| has_type(e, "CreateAction")).collect();
    if actions.is_empty() {
        failures.push("no CreateAction entity".into());
    }
    for a in actions {
        match a.pointer("/instrument/@id").and_then(Value::as_str) {
            Some(i) if ids.contains(i) => {}
            Some(i) => failures.push(format!("CreateAction instrument `{i}` is not in the graph")),
            None => failures.push(format!("CreateAction `{}` has no instrument", id_of(a).unwrap_or("?"))),
        }
    }
    ValidationReport { failures }
}
