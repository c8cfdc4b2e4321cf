//! The `hetsched` command line. Task commands talk to a running service;
//! catalog, profiling, simulation, packaging and reports work offline
//! against the state directory.

mod client;
pub mod config;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hetsched_core::catalog::{parse_tool, Catalog, ToolDescriptor, Visibility};
use hetsched_core::cluster::{load_cluster_spec, ClusterSpec};
use hetsched_core::executor::{CostModel, LocalRunner, Runner, SimulatedRunner};
use hetsched_core::monitoring::{JobFilter, StatsStore};
use hetsched_core::packager::{build_crate, validate_crate, write_crate, PackageOptions};
use hetsched_core::profiler::{
    collect_samples, expand_grid, label_samples, train_profile, ProfileStore, ProfilingRequest, DEFAULT_HEADROOM,
};
use hetsched_core::scheduler::{run_simulation, Scenario};
use hetsched_core::tasks::{EventLog, TaskState};
use hetsched_core::Error;
use hetsched_repo::{DepositMetadata, RepoClient, RepoError};
use hetsched_server::{ExecutionMode, Service, ServiceConfig};
use serde_json::{json, Value};

pub use config::{CliConfig, Overrides};

#[derive(Debug, Parser)]
#[command(name = "hetsched", version, about = "Profile-guided job scheduling on heterogeneous clusters")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Config file (default ./hetsched.yaml when present).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "HETSCHED_STATE_DIR")]
    pub state_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "HETSCHED_API_URL")]
    pub api_url: Option<String>,
    /// Cluster spec (YAML or JSON).
    #[arg(long, global = true)]
    pub cluster: Option<PathBuf>,
    /// Simulated cost models; selects simulated execution.
    #[arg(long, global = true)]
    pub cost_model: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve(ServeArgs),
    #[command(subcommand)]
    /// Manage the tool catalog.
    Tool(ToolCommand),
    /// Submit a task to the service.
    Submit(SubmitArgs),
    /// Show a task's state.
    Status {
        task: String,
        /// Include the full task record.
        #[arg(long)]
        full: bool,
    },
    /// Cancel a task.
    Cancel { task: String },
    #[command(subcommand)]
    /// Collect profiling samples and train execution profiles.
    Profile(ProfileCommand),
    /// Replay a scenario through the scheduler simulator.
    Simulate {
        scenario: PathBuf,
        /// Ignore execution profiles.
        #[arg(long)]
        no_profiles: bool,
        /// Write the event trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Build an RO-Crate for a completed task.
    Package {
        task: String,
        #[arg(long)]
        doi: Option<String>,
        #[arg(long)]
        author: Option<String>,
        /// Output directory (default <state_dir>/crates/<task>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check an RO-Crate directory.
    Validate { dir: PathBuf },
    #[command(subcommand)]
    /// Exchange files with a research data repository.
    Repo(RepoCommand),
    #[command(subcommand)]
    /// Job and load reports from the event log.
    Report(ReportCommand),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    /// Force local execution even when a cost model is configured.
    #[arg(long)]
    pub local: bool,
    /// Real seconds slept per simulated second.
    #[arg(long, default_value_t = 1.0)]
    pub time_scale: f64,
    #[arg(long, default_value_t = 1)]
    pub jobs_per_node: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum ToolCommand {
    /// Register a CWL CommandLineTool.
    Add {
        path: PathBuf,
        #[arg(long)]
        private: bool,
    },
    /// List registered tools.
    List,
}

#[derive(Debug, Args)]
pub struct SubmitArgs {
    /// `id` or `id@version`.
    pub tool: String,
    /// Input binding `k=v`; `k=@path` binds a file.
    #[arg(long = "input", short = 'i')]
    pub inputs: Vec<String>,
    /// Requested CPU cores.
    #[arg(long)]
    pub cpu: Option<f64>,
    /// Requested memory in MB.
    #[arg(long)]
    pub mem: Option<u64>,
    #[arg(long = "tag")]
    pub tags: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum ProfileCommand {
    /// Run the tool over a grid of input alternatives and save the samples.
    Grid {
        tool: String,
        /// `k=v1,v2,...`; `@path` values bind files.
        #[arg(long = "alt")]
        alternatives: Vec<String>,
        #[arg(long, default_value_t = 500)]
        max_runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        #[arg(long, default_value_t = DEFAULT_HEADROOM)]
        headroom: f64,
    },
    /// Train and store an execution profile from saved samples.
    Train {
        tool: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_HEADROOM)]
        headroom: f64,
    },
}

#[derive(Debug, Subcommand)]
pub enum RepoCommand {
    /// Download every file of a record, verifying checksums.
    Pull {
        record: String,
        #[arg(long, default_value = ".")]
        dest: PathBuf,
        /// Repository name from the config.
        #[arg(long)]
        repo: Option<String>,
        #[arg(long)]
        url: Option<String>,
    },
    /// Deposit files and publish them.
    Push {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        title: String,
        #[arg(long, default_value = "")]
        description: String,
        #[arg(long = "creator")]
        creators: Vec<String>,
        #[arg(long)]
        repo: Option<String>,
        #[arg(long)]
        url: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReportCommand {
    /// Per-job timings and placements.
    Jobs {
        #[arg(long)]
        tool: Option<String>,
        #[arg(long)]
        state: Option<String>,
        #[arg(long)]
        since: Option<f64>,
    },
    /// Busy seconds per node class over a window.
    Load {
        #[arg(long)]
        from: Option<f64>,
        #[arg(long)]
        to: Option<f64>,
    },
}

/// Failure with its exit code: 1 for user errors, 2 for system errors.
#[derive(Debug)]
pub enum CliError {
    User(String),
    System(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::System(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::User(m) | CliError::System(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::RunnerUnavailable(_) | Error::Spawn { .. } => CliError::System(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<RepoError> for CliError {
    fn from(e: RepoError) -> Self {
        match &e {
            RepoError::Network(_) | RepoError::Io(_) => CliError::System(e.to_string()),
            RepoError::Repository { status, .. } if *status >= 500 => CliError::System(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

fn io_err(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::System(format!("{context}: {e}"))
}

/// Command result: a JSON document plus its text rendering.
#[derive(Debug, Clone)]
pub struct Output {
    pub json: Value,
    pub text: String,
}

impl Output {
    fn new(json: Value, text: impl Into<String>) -> Self {
        Self { json, text: text.into() }
    }
}

/// Parses `argv`, runs the command, prints its output, and returns the
/// process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(out) => {
            emit(&out, json);
            0
        }
        Err(e) => {
            if json {
                println!("{}", json!({ "error": e.message(), "exit_code": e.exit_code() }));
            }
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn emit(out: &Output, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(&out.json).expect("output serializes"));
    } else if !out.text.is_empty() {
        println!("{}", out.text.trim_end());
    }
}

pub fn run(cli: Cli) -> Result<Output, CliError> {
    let config = CliConfig::resolve(Overrides {
        config: cli.config,
        state_dir: cli.state_dir,
        api_url: cli.api_url,
        cluster: cli.cluster,
        cost_model: cli.cost_model,
    })?;
    match cli.command {
        Command::Serve(args) => serve(&config, args, cli.json),
        Command::Tool(ToolCommand::Add { path, private }) => tool_add(&config, &path, private),
        Command::Tool(ToolCommand::List) => tool_list(&config),
        Command::Submit(args) => block_on(client::submit(&config, args)),
        Command::Status { task, full } => block_on(client::status(&config, &task, full)),
        Command::Cancel { task } => block_on(client::cancel(&config, &task)),
        Command::Profile(ProfileCommand::Grid { tool, alternatives, max_runs, seed, parallelism, headroom }) => {
            profile_grid(&config, &tool, &alternatives, max_runs, seed, parallelism, headroom)
        }
        Command::Profile(ProfileCommand::Train { tool, seed, headroom }) => profile_train(&config, &tool, seed, headroom),
        Command::Simulate { scenario, no_profiles, trace } => simulate(&config, &scenario, !no_profiles, trace.as_deref()),
        Command::Package { task, doi, author, out } => package(&config, &task, PackageOptions { doi, author }, out),
        Command::Validate { dir } => validate(&dir),
        Command::Repo(cmd) => block_on(repo(&config, cmd)),
        Command::Report(cmd) => report(&config, cmd),
    }
}

fn block_on<T>(fut: impl std::future::Future<Output = Result<T, CliError>>) -> Result<T, CliError> {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(io_err("cannot start runtime"))?
        .block_on(fut)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))
}

fn load_cluster(config: &CliConfig) -> Result<ClusterSpec, CliError> {
    Ok(load_cluster_spec(&read_text(config.cluster_path()?)?)?)
}

fn load_cost_model(config: &CliConfig) -> Result<Option<CostModel>, CliError> {
    match &config.cost_model {
        Some(p) => Ok(Some(CostModel::parse(&read_text(p)?)?)),
        None => Ok(None),
    }
}

fn resolve_tool(catalog: &Catalog, reference: &str) -> Result<ToolDescriptor, CliError> {
    catalog.resolve(reference).ok_or_else(|| CliError::User(format!("unknown tool `{reference}`")))
}

fn serve(config: &CliConfig, args: ServeArgs, json: bool) -> Result<Output, CliError> {
    let cluster = load_cluster(config)?;
    let mode = match load_cost_model(config)? {
        Some(cost_models) if !args.local => {
            if !(args.time_scale.is_finite() && args.time_scale >= 0.0) {
                return Err(CliError::User("--time-scale must be a non-negative number".into()));
            }
            ExecutionMode::Simulated { cost_models, time_scale: args.time_scale }
        }
        _ => ExecutionMode::Local,
    };
    let mut service_config = ServiceConfig::new(&config.state_dir, cluster, mode);
    service_config.work_dir = config.work_dir.clone();
    service_config.jobs_per_node = args.jobs_per_node.max(1);
    service_config.seed = args.seed;
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .try_init();
    let runtime = tokio::runtime::Runtime::new().map_err(io_err("cannot start runtime"))?;
    runtime.block_on(async move {
        let service = Service::start(service_config).await?;
        let (addr, handle) = service.spawn(args.listen).await.map_err(io_err(format!("cannot bind {}", args.listen)))?;
        // The address goes out before blocking so callers can connect.
        if json {
            println!("{}", json!({ "listening": addr.to_string() }));
        } else {
            println!("listening on http://{addr}");
        }
        let _ = std::io::stdout().flush();
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = handle => {}
        }
        Ok(Output::new(json!({ "stopped": true }), ""))
    })
}

fn tool_add(config: &CliConfig, path: &Path, private: bool) -> Result<Output, CliError> {
    let tool = parse_tool(&read_text(path)?)?;
    let catalog = Catalog::open(&config.state_dir)?;
    let visibility = if private { Visibility::Private } else { Visibility::Public };
    let record = catalog.register(tool, visibility)?;
    let reference = record.descriptor.reference();
    Ok(Output::new(
        json!({ "id": record.descriptor.id, "version": record.descriptor.version, "visibility": record.visibility }),
        format!("registered {reference}"),
    ))
}

fn tool_list(config: &CliConfig) -> Result<Output, CliError> {
    let catalog = Catalog::open(&config.state_dir)?;
    let profiles = ProfileStore::open(&config.state_dir)?;
    let records = catalog.list(None);
    let rows: Vec<Value> = records
        .iter()
        .map(|r| {
            json!({
                "id": r.descriptor.id,
                "version": r.descriptor.version,
                "image_ref": r.descriptor.image_ref,
                "visibility": r.visibility,
                "profiled": profiles.get(&r.descriptor.id).is_some(),
            })
        })
        .collect();
    let mut table = vec![vec!["ID".into(), "VERSION".into(), "VISIBILITY".into(), "PROFILED".into()]];
    for r in &records {
        table.push(vec![
            r.descriptor.id.clone(),
            r.descriptor.version.clone(),
            format!("{:?}", r.visibility).to_lowercase(),
            profiles.get(&r.descriptor.id).is_some().to_string(),
        ]);
    }
    Ok(Output::new(json!({ "tools": rows }), render_table(&table)))
}

/// `k=v` → (k, v) with `@path` turned into a File object carrying the
/// path and its size.
pub(crate) fn parse_binding(raw: &str) -> Result<(String, Value), CliError> {
    let (k, v) = raw
        .split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| CliError::User(format!("expected key=value, got `{raw}`")))?;
    Ok((k.to_string(), binding_value(v)?))
}

fn binding_value(v: &str) -> Result<Value, CliError> {
    match v.strip_prefix('@') {
        Some(path) => {
            let abs = std::fs::canonicalize(path).map_err(|e| CliError::User(format!("input file {path}: {e}")))?;
            let size = std::fs::metadata(&abs).map_err(|e| CliError::User(format!("input file {path}: {e}")))?.len();
            Ok(json!({ "class": "File", "path": abs, "size": size }))
        }
        None => Ok(Value::String(v.to_string())),
    }
}

fn runner_for(config: &CliConfig, tool: &ToolDescriptor) -> Result<Box<dyn Runner>, CliError> {
    Ok(match load_cost_model(config)? {
        Some(model) => Box::new(SimulatedRunner::new(model, [tool.clone()]).with_workspace(config.work_dir.join("profiling"))),
        None => Box::new(LocalRunner {
            work_dir: config.work_dir.join("profiling"),
            tools: [(tool.id.clone(), tool.clone())].into(),
        }),
    })
}

fn profile_grid(
    config: &CliConfig,
    reference: &str,
    alternatives: &[String],
    max_runs: usize,
    seed: u64,
    parallelism: usize,
    headroom: f64,
) -> Result<Output, CliError> {
    let catalog = Catalog::open(&config.state_dir)?;
    let tool = resolve_tool(&catalog, reference)?;
    let cluster = load_cluster(config)?;
    let mut alts: BTreeMap<String, Vec<Value>> = BTreeMap::new();
    for raw in alternatives {
        let (k, vs) = raw
            .split_once('=')
            .filter(|(k, _)| !k.is_empty())
            .ok_or_else(|| CliError::User(format!("expected key=v1,v2,..., got `{raw}`")))?;
        let values = vs.split(',').map(binding_value).collect::<Result<Vec<_>, _>>()?;
        alts.entry(k.to_string()).or_default().extend(values);
    }
    let request = ProfilingRequest { tool_id: tool.id.clone(), alternatives: alts, max_runs, seed };
    let grid = expand_grid(&request, &tool)?;
    let runner = runner_for(config, &tool)?;
    let mut dataset = collect_samples(&tool, &grid, runner.as_ref(), seed, parallelism.max(1), None)?;
    let labeled = label_samples(&mut dataset, &cluster.classes, headroom)?;
    let store = ProfileStore::open(&config.state_dir)?;
    store.save_samples(&dataset)?;
    let failed = dataset.failures().count();
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    for s in &dataset.samples {
        if let Some(l) = &s.label {
            *labels.entry(l.clone()).or_default() += 1;
        }
    }
    Ok(Output::new(
        json!({ "tool_id": tool.id, "runs": grid.len(), "failed": failed, "labeled": labeled, "labels": labels }),
        format!("{} runs, {failed} failed, {labeled} labeled {labels:?}", grid.len()),
    ))
}

fn profile_train(config: &CliConfig, reference: &str, seed: u64, headroom: f64) -> Result<Output, CliError> {
    let catalog = Catalog::open(&config.state_dir)?;
    let tool = resolve_tool(&catalog, reference)?;
    let cluster = load_cluster(config)?;
    let store = ProfileStore::open(&config.state_dir)?;
    let mut dataset = store.load_samples(&tool)?;
    // Relabel: the cluster may have changed since the samples were taken.
    label_samples(&mut dataset, &cluster.classes, headroom)?;
    let profile = train_profile(&dataset, seed)?;
    store.insert(profile.clone())?;
    let family = serde_json::to_value(profile.model.family).expect("family serializes");
    let family = family.as_str().map_or_else(|| family.to_string(), str::to_string);
    Ok(Output::new(
        json!({
            "tool_id": profile.tool_id,
            "family": family,
            "model": profile.model.hyperparams,
            "cv_accuracy": profile.cv_accuracy,
            "sample_count": profile.sample_count,
            "degenerate": profile.degenerate,
        }),
        format!(
            "trained {} profile for {}: cv accuracy {:.3} over {} samples",
            family, profile.tool_id, profile.cv_accuracy, profile.sample_count
        ),
    ))
}

fn simulate(config: &CliConfig, path: &Path, use_profiles: bool, trace: Option<&Path>) -> Result<Output, CliError> {
    let mut scenario = Scenario::parse(&read_text(path)?, path.parent())?;
    scenario.use_profiles = use_profiles;
    let profiles = if !use_profiles {
        ProfileStore::in_memory()
    } else if scenario.profiling.is_empty() {
        ProfileStore::open(&config.state_dir)?
    } else {
        scenario.train_profiles()?
    };
    let report = run_simulation(&scenario, &profiles)?;
    if let Some(t) = trace {
        std::fs::write(t, report.trace_jsonl()).map_err(io_err(t.display()))?;
    }
    let json = json!({
        "use_profiles": report.use_profiles,
        "seed": report.seed,
        "makespan": report.makespan,
        "per_class_busy_seconds": report.per_class_busy_seconds,
        "per_class_busy_by_origin": report.per_class_busy_by_origin,
        "mean_wait_seconds": report.mean_wait_seconds,
        "max_wait_seconds": report.max_wait_seconds,
        "final_states": report.final_states,
        "events": report.trace.len(),
    });
    let mut text = format!(
        "profiles: {}\nmakespan: {:.3} s\nmean wait: {:.3} s (max {:.3} s)\n",
        if use_profiles { "on" } else { "off" },
        report.makespan,
        report.mean_wait_seconds,
        report.max_wait_seconds
    );
    let mut table = vec![vec!["CLASS".to_string(), "BUSY_SECONDS".to_string()]];
    for (class, busy) in &report.per_class_busy_seconds {
        table.push(vec![class.clone(), format!("{busy:.3}")]);
    }
    text.push_str(&render_table(&table));
    Ok(Output::new(json, text))
}

fn package(config: &CliConfig, id: &str, options: PackageOptions, out: Option<PathBuf>) -> Result<Output, CliError> {
    let (store, _) = EventLog::recover(&config.state_dir)?;
    let task = store.get(id).ok_or_else(|| CliError::User(format!("unknown task `{id}`")))?;
    let catalog = Catalog::open(&config.state_dir)?;
    let tool = resolve_tool(&catalog, &task.jobspec.tool_ref())?;
    let pkg = build_crate(task, &tool, &options)?;
    let dir = out.unwrap_or_else(|| config.state_dir.join("crates").join(id));
    let files = write_crate(&pkg, &dir)?;
    let report = validate_crate(&dir);
    if !report.is_valid() {
        return Err(CliError::System(format!("crate written to {} is invalid: {}", dir.display(), report.failures.join("; "))));
    }
    Ok(Output::new(
        json!({ "task_id": id, "path": dir, "files": files, "entities": pkg.graph.len() }),
        format!("wrote {} ({} files)", dir.display(), files.len()),
    ))
}

fn validate(dir: &Path) -> Result<Output, CliError> {
    let report = validate_crate(dir);
    let json = json!({ "path": dir, "valid": report.is_valid(), "failures": report.failures });
    if report.is_valid() {
        Ok(Output::new(json, format!("{}: valid", dir.display())))
    } else {
        Err(CliError::User(format!("{}: {}", dir.display(), report.failures.join("; "))))
    }
}

async fn repo(config: &CliConfig, cmd: RepoCommand) -> Result<Output, CliError> {
    match cmd {
        RepoCommand::Pull { record, dest, repo, url } => {
            let client = RepoClient::new(config.repository(repo.as_deref(), url.as_deref())?)?;
            std::fs::create_dir_all(&dest).map_err(io_err(dest.display()))?;
            let files = client.pull(&record, &dest).await?;
            let text = files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n");
            Ok(Output::new(json!({ "record_id": record, "files": files }), text))
        }
        RepoCommand::Push { paths, title, description, creators, repo, url } => {
            let client = RepoClient::new(config.repository(repo.as_deref(), url.as_deref())?)?;
            let metadata = DepositMetadata { title, description, creators };
            let handle = client.push(&metadata, &paths).await?;
            let doi = handle.doi.clone().unwrap_or_default();
            Ok(Output::new(serde_json::to_value(&handle).expect("handle serializes"), format!("published {doi}")))
        }
    }
}

fn report(config: &CliConfig, cmd: ReportCommand) -> Result<Output, CliError> {
    let (_, events) = EventLog::recover(&config.state_dir)?;
    let stats = StatsStore::from_events(&events)?;
    match cmd {
        ReportCommand::Jobs { tool, state, since } => {
            let state = state.map(|s| s.parse::<TaskState>()).transpose().map_err(CliError::User)?;
            let jobs = stats.job_report(&JobFilter { tool_id: tool, state, since });
            let mut table = vec![["TASK", "TOOL", "STATE", "CLASS", "WAIT_S", "RUN_S"].map(String::from).to_vec()];
            let secs = |v: Option<f64>| v.map_or("-".to_string(), |s| format!("{s:.3}"));
            for j in &jobs {
                table.push(vec![
                    j.task_id.clone(),
                    j.tool_id.clone(),
                    j.state.to_string(),
                    j.node_class.clone().unwrap_or_else(|| "-".into()),
                    secs(j.wait_seconds),
                    secs(j.run_seconds),
                ]);
            }
            Ok(Output::new(json!({ "jobs": jobs }), render_table(&table)))
        }
        ReportCommand::Load { from, to } => {
            let cluster = load_cluster(config)?;
            let last = events.last().map_or(0.0, |e| e.time);
            let to = to.unwrap_or(last);
            let from = from.unwrap_or_else(|| events.first().map_or(to, |e| e.time));
            let to = if to > from { to } else { from + 1.0 };
            let load = stats.cluster_load_report(from, to, &cluster)?;
            let mut table = vec![["CLASS", "NODES", "BUSY_S", "UTILIZATION"].map(String::from).to_vec()];
            for (name, c) in &load.classes {
                table.push(vec![
                    name.clone(),
                    c.node_count.to_string(),
                    format!("{:.3}", c.busy_seconds),
                    format!("{:.3}", c.utilization),
                ]);
            }
            Ok(Output::new(serde_json::to_value(&load).expect("report serializes"), render_table(&table)))
        }
    }
}

/// Left-aligned columns separated by two spaces.
pub fn render_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().enumerate().map(|(i, cell)| format!("{cell:<w$}", w = widths[i])).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_columns_align() {
        let t = render_table(&[vec!["A".into(), "BB".into()], vec!["ccc".into(), "d".into()]]);
        assert_eq!(t, "A    BB\nccc  d\n");
    }

    #[test]
    fn bindings_split_on_first_equals_and_stage_files() {
        let (k, v) = parse_binding("expr=a=b").unwrap();
        assert_eq!((k.as_str(), v), ("expr", json!("a=b")));
        assert!(matches!(parse_binding("novalue"), Err(CliError::User(_))));
        assert!(matches!(parse_binding("=x"), Err(CliError::User(_))));

        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("data.txt");
        std::fs::write(&f, b"hello").unwrap();
        let (_, v) = parse_binding(&format!("reads=@{}", f.display())).unwrap();
        assert_eq!(v["class"], "File");
        assert_eq!(v["size"], 5);
        assert!(matches!(parse_binding("reads=@/definitely/missing"), Err(CliError::User(_))));
    }
}
