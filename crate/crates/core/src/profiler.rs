//! Execution profiling: run a tool over a grid of alternative inputs,
//! label each run with the cheapest node class that could have hosted it,
//! and train a classifier that predicts that class from input features.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Bindings, ParamType, ParamValue, ToolDescriptor};
use crate::classifiers::{grid_search, Dataset, GridEntry, ModelConfig, ModelParams, Standardizer, TrainedModel, TreeNode};
use crate::cluster::NodeClass;
use crate::error::{Error, Result};
use crate::executor::{Consumption, Runner, MIB};
use crate::tasks::JobSpec;

pub const DEFAULT_HEADROOM: f64 = 1.1;
pub const DEFAULT_FOLDS: usize = 5;
pub const MIN_TRAINING_SAMPLES: usize = 10;

/// Named numeric features of resolved bindings, as seen by cost models.
///
/// Numbers map to themselves, booleans to 0/1, files to their size in MiB
/// (0 when unknown), and strings/enums to an indicator named `input=value`.
pub fn raw_features(tool: &ToolDescriptor, bindings: &Bindings) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for input in &tool.inputs {
        let Some(value) = bindings.get(&input.id) else { continue };
        match value {
            ParamValue::String(s) => {
                out.insert(format!("{}={s}", input.id), 1.0);
            }
            other => {
                out.insert(input.id.clone(), numeric_value(other));
            }
        }
    }
    out
}

fn numeric_value(value: &ParamValue) -> f64 {
    match value {
        ParamValue::Int(v) => *v as f64,
        ParamValue::Float(v) => *v,
        ParamValue::Boolean(b) => f64::from(u8::from(*b)),
        ParamValue::File(f) => f.resolved_size().map_or(0.0, |s| s as f64 / MIB),
        ParamValue::String(_) => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureKind {
    Numeric,
    OneHot { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub input: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

/// Ordered feature layout: one entry per tool input in declaration order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    /// Builds the schema from the profiling grid. Categories of string and
    /// enum inputs are the values observed, in first-appearance order.
    pub fn build(tool: &ToolDescriptor, grid: &[Bindings]) -> Self {
        let features = tool
            .inputs
            .iter()
            .map(|input| {
                let kind = match input.param_type {
                    ParamType::String | ParamType::Enum { .. } => {
                        let mut categories: Vec<String> = Vec::new();
                        for b in grid {
                            if let Some(ParamValue::String(s)) = b.get(&input.id) {
                                if !categories.contains(s) {
                                    categories.push(s.clone());
                                }
                            }
                        }
                        FeatureKind::OneHot { categories }
                    }
                    _ => FeatureKind::Numeric,
                };
                FeatureSpec { input: input.id.clone(), kind }
            })
            .collect();
        Self { features }
    }

    pub fn dim(&self) -> usize {
        self.features
            .iter()
            .map(|f| match &f.kind {
                FeatureKind::Numeric => 1,
                FeatureKind::OneHot { categories } => categories.len(),
            })
            .sum()
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for f in &self.features {
            match &f.kind {
                FeatureKind::Numeric => names.push(f.input.clone()),
                FeatureKind::OneHot { categories } => {
                    names.extend(categories.iter().map(|c| format!("{}={c}", f.input)));
                }
            }
        }
        names
    }

    /// Feature vector for already-resolved bindings. Missing inputs encode
    /// as zeros, as do categories not seen while building the schema.
    pub fn extract(&self, bindings: &Bindings) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        for f in &self.features {
            let value = bindings.get(&f.input);
            match &f.kind {
                FeatureKind::Numeric => x.push(value.map_or(0.0, numeric_value)),
                FeatureKind::OneHot { categories } => {
                    let hit = match value {
                        Some(ParamValue::String(s)) => categories.iter().position(|c| c == s),
                        _ => None,
                    };
                    x.extend((0..categories.len()).map(|i| if Some(i) == hit { 1.0 } else { 0.0 }));
                }
            }
        }
        x
    }
}

/// Feature vector for `bindings`, building a schema from these bindings
/// alone when none is supplied.
pub fn extract_features(
    bindings: &Bindings,
    tool: &ToolDescriptor,
    schema: Option<&FeatureSchema>,
) -> Result<(Vec<f64>, FeatureSchema)> {
    let resolved = tool.resolve_bindings(bindings)?;
    let schema = match schema {
        Some(s) => s.clone(),
        None => FeatureSchema::build(tool, std::slice::from_ref(&resolved)),
    };
    Ok((schema.extract(&resolved), schema))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilingRequest {
    pub tool_id: String,
    /// Candidate values per input id; coerced to the input's declared type.
    pub alternatives: BTreeMap<String, Vec<serde_json::Value>>,
    #[serde(default = "default_max_runs")]
    pub max_runs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_runs() -> usize {
    500
}

/// Cartesian product of the alternatives. Inputs vary in declaration order
/// with the first declared input varying slowest; inputs without
/// alternatives fall back to their defaults.
pub fn expand_grid(request: &ProfilingRequest, tool: &ToolDescriptor) -> Result<Vec<Bindings>> {
    for key in request.alternatives.keys() {
        if tool.input(key).is_none() {
            return Err(Error::UnknownInput(key.clone()));
        }
    }
    let mut axes: Vec<(&str, Vec<ParamValue>)> = Vec::new();
    for input in &tool.inputs {
        match request.alternatives.get(&input.id) {
            Some(values) if !values.is_empty() => {
                let coerced = values
                    .iter()
                    .map(|v| ParamValue::coerce(&input.param_type, v))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|message| Error::TypeMismatch { input: input.id.clone(), message })?;
                axes.push((&input.id, coerced));
            }
            Some(_) => return Err(Error::invalid(format!("input `{}` has an empty alternative list", input.id))),
            None if input.required && input.default.is_none() => {
                return Err(Error::MissingRequiredInput(input.id.clone()))
            }
            None => {}
        }
    }
    let size = axes.iter().try_fold(1u128, |acc, (_, v)| acc.checked_mul(v.len() as u128)).unwrap_or(u128::MAX);
    if size > request.max_runs as u128 {
        return Err(Error::GridTooLarge { size, max: request.max_runs });
    }
    let mut grid = vec![Bindings::new()];
    for (id, values) in &axes {
        let mut next = Vec::with_capacity(grid.len() * values.len());
        for partial in &grid {
            for v in values {
                let mut b = partial.clone();
                b.insert(id.to_string(), v.clone());
                next.push(b);
            }
        }
        grid = next;
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub index: usize,
    pub task_id: String,
    pub bindings: Bindings,
    pub features: Vec<f64>,
    pub exit_status: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumption: Option<Consumption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ProfileSample {
    pub fn succeeded(&self) -> bool {
        self.exit_status == 0 && self.error.is_none() && self.consumption.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDataset {
    pub tool_id: String,
    pub schema: FeatureSchema,
    /// Every grid point in grid order, failed runs included.
    pub samples: Vec<ProfileSample>,
}

impl ProfileDataset {
    pub fn successes(&self) -> impl Iterator<Item = &ProfileSample> {
        self.samples.iter().filter(|s| s.succeeded())
    }

    pub fn failures(&self) -> impl Iterator<Item = &ProfileSample> {
        self.samples.iter().filter(|s| !s.succeeded())
    }

    /// Successful, labeled samples as a classifier dataset.
    pub fn training_set(&self) -> Dataset {
        let rows: Vec<&ProfileSample> = self.successes().filter(|s| s.label.is_some()).collect();
        Dataset {
            x: rows.iter().map(|s| s.features.clone()).collect(),
            y: rows.iter().map(|s| s.label.clone().unwrap_or_default()).collect(),
        }
    }

    /// Writes one sample per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for s in &self.samples {
            serde_json::to_writer(&mut buf, s)?;
            buf.push(b'\n');
        }
        let tmp = path.with_extension("jsonl.tmp");
        fs::File::create(&tmp)?.write_all(&buf)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    /// Reads samples written by [`ProfileDataset::write_jsonl`]; the feature
    /// schema is rebuilt from the sampled bindings.
    pub fn read_jsonl(tool: &ToolDescriptor, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut samples = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            samples.push(serde_json::from_str::<ProfileSample>(line)?);
        }
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let grid: Vec<Bindings> = samples.iter().map(|s| s.bindings.clone()).collect();
        let schema = FeatureSchema::build(tool, &grid);
        for s in &mut samples {
            s.features = schema.extract(&tool.resolve_bindings(&s.bindings)?);
        }
        Ok(Self { tool_id: tool.id.clone(), schema, samples })
    }
}

/// Task id used for the `index`-th profiling run of `tool_id`.
pub fn profile_task_id(tool_id: &str, index: usize) -> String {
    format!("profile-{tool_id}-{index:04}")
}

/// Runs every grid point through `runner` on up to `parallelism` threads.
///
/// Sample order follows the grid regardless of completion order. Runs that
/// exit nonzero or error are kept as failed samples. `progress` is called
/// with `(finished, total)` after each run.
pub fn collect_samples(
    tool: &ToolDescriptor,
    grid: &[Bindings],
    runner: &dyn Runner,
    seed: u64,
    parallelism: usize,
    progress: Option<&(dyn Fn(usize, usize) + Sync)>,
) -> Result<ProfileDataset> {
    if grid.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let resolved = grid.iter().map(|b| tool.resolve_bindings(b)).collect::<Result<Vec<_>>>()?;
    let schema = FeatureSchema::build(tool, &resolved);
    let done = AtomicUsize::new(0);
    let total = grid.len();

    let run_one = |index: usize| -> Result<ProfileSample> {
        let task_id = profile_task_id(&tool.id, index);
        let mut job = JobSpec::new(tool.id.clone(), grid[index].clone());
        job.version = Some(tool.version.clone());
        let outcome = runner.run(&task_id, &job, seed);
        let finished = done.fetch_add(1, Ordering::SeqCst) + 1;
        if let Some(p) = progress {
            p(finished, total);
        }
        let mut sample = ProfileSample {
            index,
            task_id,
            bindings: grid[index].clone(),
            features: schema.extract(&resolved[index]),
            exit_status: 0,
            consumption: None,
            label: None,
            error: None,
        };
        match outcome {
            Ok(result) => {
                sample.exit_status = result.exit_status;
                if result.succeeded() {
                    sample.consumption = Some(result.consumption());
                }
            }
            Err(e @ Error::RunnerUnavailable(_)) => return Err(e),
            Err(e) => {
                tracing::warn!("profiling run {} failed: {e}", sample.task_id);
                sample.exit_status = -1;
                sample.error = Some(e.to_string());
            }
        }
        Ok(sample)
    };

    let samples: Vec<ProfileSample> = if parallelism <= 1 {
        (0..total).map(run_one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::RunnerUnavailable(e.to_string()))?;
        pool.install(|| (0..total).into_par_iter().map(run_one).collect::<Result<_>>())?
    };
    Ok(ProfileDataset { tool_id: tool.id.clone(), schema, samples })
}

/// Cheapest class (by cost rank) whose capacity covers `headroom` times the
/// measured peak memory and output size, plus one CPU core.
pub fn label_for<'a>(consumption: &Consumption, classes: &'a [NodeClass], headroom: f64) -> Option<&'a NodeClass> {
    let mut sorted: Vec<&NodeClass> = classes.iter().collect();
    sorted.sort_by_key(|c| c.cost_rank);
    let mem = headroom * consumption.peak_mem_mb;
    let disk = headroom * consumption.output_mb;
    sorted.into_iter().find(|c| {
        c.capacity.memory_mb as f64 >= mem && c.capacity.cpu_cores() >= 1.0 && c.capacity.disk_mb as f64 >= disk
    })
}

/// Labels every successful sample; samples no class can host stay
/// unlabeled and are reported with a warning. Returns the number labeled.
pub fn label_samples(dataset: &mut ProfileDataset, classes: &[NodeClass], headroom: f64) -> Result<usize> {
    if !(headroom.is_finite() && headroom >= 1.0) {
        return Err(Error::invalid("headroom must be >= 1"));
    }
    let mut labeled = 0;
    for sample in &mut dataset.samples {
        sample.label = None;
        let Some(consumption) = sample.consumption.filter(|_| sample.exit_status == 0) else { continue };
        match label_for(&consumption, classes, headroom) {
            Some(class) => {
                sample.label = Some(class.name.clone());
                labeled += 1;
            }
            None => tracing::warn!(
                "sample {} (peak {:.0} MB) fits no node class; dropped",
                sample.task_id,
                consumption.peak_mem_mb
            ),
        }
    }
    if labeled == 0 {
        return Err(Error::AllSamplesUnlabelable);
    }
    Ok(labeled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionProfile {
    pub tool_id: String,
    pub feature_schema: FeatureSchema,
    pub standardizer: Standardizer,
    pub model: TrainedModel,
    pub cv_accuracy: f64,
    pub created_at: DateTime<Utc>,
    pub sample_count: usize,
    /// Set when the training data had a single label.
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grid: Vec<GridEntry>,
}

impl ExecutionProfile {
    pub fn validate(&self) -> Result<()> {
        let expected = self.feature_schema.dim();
        if self.standardizer.dim() != expected {
            return Err(Error::FeatureMismatch { expected, got: self.standardizer.dim() });
        }
        if let Some(got) = self.model.input_dim() {
            if got != expected {
                return Err(Error::FeatureMismatch { expected, got });
            }
        }
        if !(0.0..=1.0).contains(&self.cv_accuracy) {
            return Err(Error::invalid("cv_accuracy must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Predicted node class for raw bindings of this profile's tool.
    pub fn predict(&self, tool: &ToolDescriptor, bindings: &Bindings) -> Result<String> {
        let resolved = tool.resolve_bindings(bindings)?;
        self.predict_features(&self.feature_schema.extract(&resolved))
    }

    pub fn predict_features(&self, x: &[f64]) -> Result<String> {
        let expected = self.feature_schema.dim();
        if x.len() != expected || self.standardizer.dim() != expected {
            return Err(Error::FeatureMismatch { expected, got: x.len() });
        }
        if let Some(got) = self.model.input_dim().filter(|&d| d != expected) {
            return Err(Error::FeatureMismatch { expected, got });
        }
        Ok(self.model.predict(&self.standardizer.transform_row(x)))
    }
}

/// Grid-searches a classifier over the labeled successful samples and refits
/// the winner on all of them.
pub fn train_profile(dataset: &ProfileDataset, seed: u64) -> Result<ExecutionProfile> {
    let data = dataset.training_set();
    if data.len() < MIN_TRAINING_SAMPLES {
        return Err(Error::TooFewSamples { got: data.len(), min: MIN_TRAINING_SAMPLES });
    }
    let standardizer = Standardizer::fit(&data.x);
    let scaled = Dataset { x: standardizer.transform(&data.x), y: data.y.clone() };
    let classes = data.classes();

    let (model, cv_accuracy, degenerate, grid) = if classes.len() == 1 {
        let model = TrainedModel {
            family: crate::classifiers::Family::Tree,
            hyperparams: ModelConfig::Tree { max_depth: Some(0) },
            params: ModelParams::Tree { root: TreeNode::Leaf { label: classes[0].clone() } },
        };
        (model, 1.0, true, Vec::new())
    } else {
        let result = grid_search(&data, DEFAULT_FOLDS, seed)?;
        let model = TrainedModel::fit(result.best, &scaled)?;
        (model, result.accuracy, false, result.entries)
    };

    let profile = ExecutionProfile {
        tool_id: dataset.tool_id.clone(),
        feature_schema: dataset.schema.clone(),
        standardizer,
        model,
        cv_accuracy,
        created_at: Utc::now(),
        sample_count: data.len(),
        degenerate,
        grid,
    };
    profile.validate()?;
    Ok(profile)
}

/// Options for [`profile_tool`].
#[derive(Debug, Clone, Copy)]
pub struct ProfilingOptions {
    pub headroom: f64,
    pub parallelism: usize,
}

impl Default for ProfilingOptions {
    fn default() -> Self {
        Self { headroom: DEFAULT_HEADROOM, parallelism: 1 }
    }
}

/// Grid expansion, sample collection, labeling, and training in one call.
pub fn profile_tool(
    request: &ProfilingRequest,
    tool: &ToolDescriptor,
    runner: &dyn Runner,
    classes: &[NodeClass],
    options: ProfilingOptions,
    progress: Option<&(dyn Fn(usize, usize) + Sync)>,
) -> Result<(ExecutionProfile, ProfileDataset)> {
    let grid = expand_grid(request, tool)?;
    let mut dataset = collect_samples(tool, &grid, runner, request.seed, options.parallelism, progress)?;
    label_samples(&mut dataset, classes, options.headroom)?;
    let profile = train_profile(&dataset, request.seed)?;
    Ok((profile, dataset))
}

/// Execution profiles by tool id, optionally persisted under
/// `<state_dir>/profiles/`.
#[derive(Debug, Default)]
pub struct ProfileStore {
    dir: Option<PathBuf>,
    profiles: RwLock<BTreeMap<String, ExecutionProfile>>,
}

impl ProfileStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(state_dir: &Path) -> Result<Self> {
        let dir = state_dir.join("profiles");
        fs::create_dir_all(&dir)?;
        let store = Self { dir: Some(dir), profiles: RwLock::default() };
        store.refresh()?;
        Ok(store)
    }

    /// Reloads persisted profiles; unreadable files are skipped with a warning.
    pub fn refresh(&self) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let mut loaded = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let parsed = fs::read_to_string(&path)
                .map_err(Error::from)
                .and_then(|t| serde_json::from_str::<ExecutionProfile>(&t).map_err(Error::from));
            match parsed {
                Ok(p) => {
                    loaded.insert(p.tool_id.clone(), p);
                }
                Err(e) => tracing::warn!("skipping profile {}: {e}", path.display()),
            }
        }
        *self.profiles.write().expect("profile lock") = loaded;
        Ok(())
    }

    pub fn insert(&self, profile: ExecutionProfile) -> Result<()> {
        profile.validate()?;
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{}.json", profile.tool_id));
            let tmp = dir.join(format!("{}.json.tmp", profile.tool_id));
            fs::write(&tmp, serde_json::to_vec_pretty(&profile)?)?;
            fs::rename(tmp, path)?;
        }
        self.profiles.write().expect("profile lock").insert(profile.tool_id.clone(), profile);
        Ok(())
    }

    pub fn save_samples(&self, dataset: &ProfileDataset) -> Result<()> {
        if let Some(dir) = &self.dir {
            dataset.write_jsonl(&dir.join(format!("{}.samples.jsonl", dataset.tool_id)))?;
        }
        Ok(())
    }

    /// Samples saved by [`ProfileStore::save_samples`] for `tool`.
    pub fn load_samples(&self, tool: &ToolDescriptor) -> Result<ProfileDataset> {
        let Some(dir) = &self.dir else {
            return Err(Error::NotFound(format!("no samples for `{}`", tool.id)));
        };
        let path = dir.join(format!("{}.samples.jsonl", tool.id));
        if !path.exists() {
            return Err(Error::NotFound(format!("no samples for `{}`; run a profiling grid first", tool.id)));
        }
        ProfileDataset::read_jsonl(tool, &path)
    }

    pub fn get(&self, tool_id: &str) -> Option<ExecutionProfile> {
        self.profiles.read().expect("profile lock").get(tool_id).cloned()
    }

    pub fn tool_ids(&self) -> Vec<String> {
        self.profiles.read().expect("profile lock").keys().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.read().expect("profile lock").is_empty()
    }
}
