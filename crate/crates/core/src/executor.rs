//! Job runners and the resource consumption they report.
//!
//! [`SimulatedRunner`] derives consumption from an affine cost model plus
//! seeded relative noise and is bit-for-bit reproducible. [`LocalRunner`]
//! spawns the real command and measures it.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::catalog::{build_command, ParamValue, ToolDescriptor};
use crate::error::{Error, Result};
use crate::profiler::raw_features;
use crate::rng::SplitMix64;
use crate::tasks::JobSpec;

pub const MIB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub id: String,
    pub path: String,
    pub size_bytes: u64,
}

/// The measured consumption of one run, without its output listing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consumption {
    pub wall_seconds: f64,
    pub cpu_seconds: f64,
    pub peak_mem_mb: f64,
    #[serde(default)]
    pub output_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub exit_status: i32,
    pub wall_seconds: f64,
    pub cpu_seconds: f64,
    pub peak_mem_mb: f64,
    pub output_files: Vec<OutputFile>,
}

impl RunResult {
    pub fn succeeded(&self) -> bool {
        self.exit_status == 0
    }

    pub fn consumption(&self) -> Consumption {
        let bytes: u64 = self.output_files.iter().map(|o| o.size_bytes).sum();
        Consumption {
            wall_seconds: self.wall_seconds,
            cpu_seconds: self.cpu_seconds,
            peak_mem_mb: self.peak_mem_mb,
            output_mb: bytes as f64 / MIB,
        }
    }
}

/// `intercept + Σ coeff·feature`; features missing from the input count as 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub coeffs: BTreeMap<String, f64>,
}

impl Affine {
    pub fn eval(&self, features: &BTreeMap<String, f64>) -> f64 {
        self.coeffs
            .iter()
            .fold(self.intercept, |acc, (name, c)| acc + c * features.get(name).copied().unwrap_or(0.0))
    }

    fn is_finite(&self) -> bool {
        self.intercept.is_finite() && self.coeffs.values().all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModelEntry {
    pub peak_mem_mb: Affine,
    pub cpu_seconds: Affine,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub failure_rate: f64,
    /// Size of each placeholder output file.
    #[serde(default)]
    pub output_size_mb: Affine,
}

/// Per-tool simulated cost models, keyed by tool id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostModel {
    pub tools: BTreeMap<String, CostModelEntry>,
}

impl CostModel {
    pub fn parse(text: &str) -> Result<Self> {
        let model: CostModel = crate::parse_document(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        for (tool, e) in &self.tools {
            if !(e.peak_mem_mb.is_finite() && e.cpu_seconds.is_finite() && e.output_size_mb.is_finite()) {
                return Err(Error::invalid(format!("cost model `{tool}`: coefficients must be finite")));
            }
            if !(e.noise_sigma.is_finite() && e.noise_sigma >= 0.0) {
                return Err(Error::invalid(format!("cost model `{tool}`: noise_sigma must be >= 0")));
            }
            if !(0.0..1.0).contains(&e.failure_rate) {
                return Err(Error::invalid(format!("cost model `{tool}`: failure_rate must be in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn entry(&self, tool_id: &str) -> Result<&CostModelEntry> {
        self.tools.get(tool_id).ok_or_else(|| Error::MissingModel(tool_id.to_string()))
    }
}

/// Something that can execute a job and measure it.
pub trait Runner: Sync {
    fn run(&self, task_id: &str, job: &JobSpec, seed: u64) -> Result<RunResult>;
}

/// File name for a placeholder output: the glob with wildcards replaced by
/// the output id.
fn placeholder_name(output_id: &str, glob: &str) -> String {
    let name = glob.replace('*', output_id).replace('?', "_");
    let name = name.rsplit('/').next().unwrap_or(&name).to_string();
    if name.is_empty() {
        output_id.to_string()
    } else {
        name
    }
}

/// Runs `job` against the cost model.
///
/// Draw order on the `(seed, task_id)` stream: one Box-Muller pair (memory
/// noise, CPU noise), then one uniform for the failure check. When
/// `workspace` is given, placeholder outputs are created under
/// `<workspace>/<task_id>/outputs/`.
pub fn run_simulated(
    task_id: &str,
    job: &JobSpec,
    tool: &ToolDescriptor,
    model: &CostModel,
    seed: u64,
    workspace: Option<&Path>,
) -> Result<RunResult> {
    let entry = model.entry(&job.tool_id)?;
    let bindings = tool.resolve_bindings(&job.bindings)?;
    let features = raw_features(tool, &bindings);

    let mut rng = SplitMix64::keyed(seed, task_id);
    let (g_mem, g_cpu) = rng.next_normal_pair();
    let failed = rng.next_f64() < entry.failure_rate;

    let sigma = entry.noise_sigma;
    let peak_mem_mb = (entry.peak_mem_mb.eval(&features).max(0.0) * (1.0 + sigma * g_mem)).max(0.0);
    let cpu_seconds = (entry.cpu_seconds.eval(&features).max(0.0) * (1.0 + sigma * g_cpu)).max(0.0);

    let mut output_files = Vec::new();
    if !failed {
        let size_bytes = (entry.output_size_mb.eval(&features).max(0.0) * MIB).round() as u64;
        let out_dir = match workspace {
            Some(ws) => ws.join(task_id).join("outputs"),
            None => PathBuf::from(task_id).join("outputs"),
        };
        if workspace.is_some() {
            fs::create_dir_all(&out_dir)?;
        }
        for output in &tool.outputs {
            let path = out_dir.join(placeholder_name(&output.id, &output.glob));
            if workspace.is_some() {
                fs::File::create(&path)?.set_len(size_bytes)?;
            }
            output_files.push(OutputFile { id: output.id.clone(), path: path.to_string_lossy().into_owned(), size_bytes });
        }
    }

    Ok(RunResult {
        exit_status: i32::from(failed),
        wall_seconds: cpu_seconds,
        cpu_seconds,
        peak_mem_mb,
        output_files,
    })
}

/// A [`Runner`] backed by [`run_simulated`].
#[derive(Debug, Clone)]
pub struct SimulatedRunner {
    pub model: CostModel,
    pub tools: BTreeMap<String, ToolDescriptor>,
    pub workspace: Option<PathBuf>,
}

impl SimulatedRunner {
    pub fn new(model: CostModel, tools: impl IntoIterator<Item = ToolDescriptor>) -> Self {
        Self { model, tools: tools.into_iter().map(|t| (t.id.clone(), t)).collect(), workspace: None }
    }

    pub fn with_workspace(mut self, dir: impl Into<PathBuf>) -> Self {
        self.workspace = Some(dir.into());
        self
    }
}

impl Runner for SimulatedRunner {
    fn run(&self, task_id: &str, job: &JobSpec, seed: u64) -> Result<RunResult> {
        let tool = self.tools.get(&job.tool_id).ok_or_else(|| Error::UnresolvedTool(job.tool_id.clone()))?;
        run_simulated(task_id, job, tool, &self.model, seed, self.workspace.as_deref())
    }
}

const SAMPLE_PERIOD: Duration = Duration::from_millis(100);
const POLL_PERIOD: Duration = Duration::from_millis(5);

/// Runs the real command in `<work_dir>/<task_id>/`.
///
/// File inputs are copied into `inputs/`; the command runs with `outputs/`
/// as its working directory and declared output globs are matched there.
/// Peak memory is the larger of the kernel's `ru_maxrss` and the process
/// tree RSS sampled every 100 ms. A nonzero exit is reported in
/// `exit_status`, not as an error. Setting `cancel` kills the process.
pub fn run_local(
    task_id: &str,
    job: &JobSpec,
    tool: &ToolDescriptor,
    work_dir: &Path,
    cancel: Option<&AtomicBool>,
) -> Result<RunResult> {
    let ws = work_dir.join(task_id);
    let inputs_dir = ws.join("inputs");
    let outputs_dir = ws.join("outputs");
    fs::create_dir_all(&inputs_dir)?;
    fs::create_dir_all(&outputs_dir)?;

    let mut bindings = tool.resolve_bindings(&job.bindings)?;
    let mut used = HashSet::new();
    for value in bindings.values_mut() {
        if let ParamValue::File(file) = value {
            let source = PathBuf::from(&file.path);
            let base = source.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
            let mut name = base.clone();
            let mut n = 1;
            while !used.insert(name.clone()) {
                name = format!("{n}_{base}");
                n += 1;
            }
            let dest = inputs_dir.join(&name);
            fs::copy(&source, &dest).map_err(|e| Error::Spawn {
                command: tool.base_command.join(" "),
                message: format!("staging input {}: {e}", source.display()),
            })?;
            file.path = dest.to_string_lossy().into_owned();
        }
    }
    let argv = build_command(tool, &bindings)?;

    let stdout = fs::File::create(ws.join("stdout"))?;
    let stderr = fs::File::create(ws.join("stderr"))?;
    let started = Instant::now();
    let child = std::process::Command::new(&argv[0])
        .args(&argv[1..])
        .current_dir(&outputs_dir)
        .stdout(stdout)
        .stderr(stderr)
        .spawn()
        .map_err(|e| Error::Spawn { command: argv.join(" "), message: e.to_string() })?;
    let pid = child.id() as libc::pid_t;

    let mut sampled_peak_kb = 0u64;
    let mut last_sample: Option<Instant> = None;
    let (status, usage) = loop {
        if let Some(done) = proc::try_wait(pid)? {
            break done;
        }
        if last_sample.is_none_or(|t| t.elapsed() >= SAMPLE_PERIOD) {
            sampled_peak_kb = sampled_peak_kb.max(proc::tree_rss_kb(pid));
            last_sample = Some(Instant::now());
        }
        if cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
            proc::kill(pid);
        }
        std::thread::sleep(POLL_PERIOD);
    };
    let wall_seconds = started.elapsed().as_secs_f64();
    let exit_status = proc::exit_code(status);

    let mut output_files = Vec::new();
    for output in &tool.outputs {
        let pattern = outputs_dir.join(&output.glob);
        let mut matched: Vec<PathBuf> = glob::glob(&pattern.to_string_lossy())
            .map_err(|e| Error::invalid(format!("output `{}`: bad glob: {e}", output.id)))?
            .filter_map(std::result::Result::ok)
            .filter(|p| p.is_file())
            .collect();
        matched.sort();
        if matched.is_empty() && exit_status == 0 {
            return Err(Error::MissingOutput { output: output.id.clone(), glob: output.glob.clone() });
        }
        for path in matched {
            let size_bytes = fs::metadata(&path)?.len();
            output_files.push(OutputFile { id: output.id.clone(), path: path.to_string_lossy().into_owned(), size_bytes });
        }
    }

    let cpu_seconds = usage.cpu_seconds.min(wall_seconds * cpu_count());
    Ok(RunResult {
        exit_status,
        wall_seconds,
        cpu_seconds,
        peak_mem_mb: sampled_peak_kb.max(usage.max_rss_kb) as f64 / 1024.0,
        output_files,
    })
}

fn cpu_count() -> f64 {
    std::thread::available_parallelism().map(|n| n.get() as f64).unwrap_or(1.0)
}

/// A [`Runner`] backed by [`run_local`].
#[derive(Debug, Clone)]
pub struct LocalRunner {
    pub work_dir: PathBuf,
    pub tools: BTreeMap<String, ToolDescriptor>,
}

impl Runner for LocalRunner {
    fn run(&self, task_id: &str, job: &JobSpec, _seed: u64) -> Result<RunResult> {
        let tool = self.tools.get(&job.tool_id).ok_or_else(|| Error::UnresolvedTool(job.tool_id.clone()))?;
        run_local(task_id, job, tool, &self.work_dir, None)
    }
}

#[cfg(unix)]
mod proc {
    use std::fs;

    pub struct Usage {
        pub cpu_seconds: f64,
        pub max_rss_kb: u64,
    }

    fn timeval_secs(tv: libc::timeval) -> f64 {
        tv.tv_sec as f64 + tv.tv_usec as f64 / 1e6
    }

    /// Non-blocking reap of `pid` with its resource usage.
    pub fn try_wait(pid: libc::pid_t) -> std::io::Result<Option<(libc::c_int, Usage)>> {
        let mut status: libc::c_int = 0;
        // SAFETY: `rusage` is plain old data and wait4 only writes into it.
        let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
        // SAFETY: pid is our own unreaped child; pointers are valid for the call.
        let rc = unsafe { libc::wait4(pid, &mut status, libc::WNOHANG, &mut usage) };
        match rc {
            0 => Ok(None),
            r if r == pid => Ok(Some((
                status,
                Usage {
                    cpu_seconds: timeval_secs(usage.ru_utime) + timeval_secs(usage.ru_stime),
                    max_rss_kb: usage.ru_maxrss.max(0) as u64,
                },
            ))),
            _ => {
                let err = std::io::Error::last_os_error();
                if err.kind() == std::io::ErrorKind::Interrupted {
                    Ok(None)
                } else {
                    Err(err)
                }
            }
        }
    }

    pub fn exit_code(status: libc::c_int) -> i32 {
        if libc::WIFEXITED(status) {
            libc::WEXITSTATUS(status)
        } else if libc::WIFSIGNALED(status) {
            128 + libc::WTERMSIG(status)
        } else {
            -1
        }
    }

    pub fn kill(pid: libc::pid_t) {
        // SAFETY: signalling our own child; failure (already exited) is harmless.
        unsafe {
            libc::kill(pid, libc::SIGKILL);
        }
    }

    fn rss_kb(pid: u32) -> u64 {
        let Ok(status) = fs::read_to_string(format!("/proc/{pid}/status")) else {
            return 0;
        };
        status
            .lines()
            .find_map(|l| l.strip_prefix("VmRSS:"))
            .and_then(|v| v.split_whitespace().next())
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    }

    fn children(pid: u32) -> Vec<u32> {
        let Ok(tasks) = fs::read_dir(format!("/proc/{pid}/task")) else {
            return Vec::new();
        };
        tasks
            .filter_map(std::result::Result::ok)
            .filter_map(|t| fs::read_to_string(t.path().join("children")).ok())
            .flat_map(|s| s.split_whitespace().filter_map(|c| c.parse().ok()).collect::<Vec<u32>>())
            .collect()
    }

    /// Summed resident memory of `pid` and all its descendants.
    pub fn tree_rss_kb(pid: libc::pid_t) -> u64 {
        let mut total = 0;
        let mut stack = vec![pid as u32];
        let mut visited = 0;
        while let Some(p) = stack.pop() {
            visited += 1;
            if visited > 4096 {
                break;
            }
            total += rss_kb(p);
            stack.extend(children(p));
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{parse_tool, Bindings, FileRef};

    fn sim_tool() -> ToolDescriptor {
        parse_tool(
            "cwlVersion: v1.2\nclass: CommandLineTool\nid: sim\nbaseCommand: [sim]\ninputs:\n  file_mb: int\noutputs:\n  out: {type: File, outputBinding: {glob: '*.dat'}}\n",
        )
        .unwrap()
    }

    fn model(sigma: f64, failure_rate: f64) -> CostModel {
        CostModel::parse(&format!(
            "sim:\n  peak_mem_mb: {{intercept: 100, coeffs: {{file_mb: 2}}}}\n  cpu_seconds: {{intercept: 1, coeffs: {{file_mb: 0.5}}}}\n  noise_sigma: {sigma}\n  failure_rate: {failure_rate}\n  output_size_mb: {{intercept: 1}}\n"
        ))
        .unwrap()
    }

    fn job(file_mb: i64) -> JobSpec {
        JobSpec::new("sim", Bindings::from([("file_mb".into(), ParamValue::Int(file_mb))]))
    }

    #[test]
    fn noise_free_affine_is_exact() {
        let r = run_simulated("t1", &job(50), &sim_tool(), &model(0.0, 0.0), 1, None).unwrap();
        assert_eq!(r.peak_mem_mb, 200.0);
        assert_eq!(r.cpu_seconds, 26.0);
        assert_eq!(r.wall_seconds, r.cpu_seconds);
        assert_eq!(r.exit_status, 0);
        assert_eq!(r.output_files.len(), 1);
        assert_eq!(r.output_files[0].size_bytes, 1 << 20);
    }

    #[test]
    fn reproducible_for_fixed_seed() {
        let a = run_simulated("t1", &job(50), &sim_tool(), &model(0.1, 0.2), 9, None).unwrap();
        let b = run_simulated("t1", &job(50), &sim_tool(), &model(0.1, 0.2), 9, None).unwrap();
        assert_eq!(a, b);
        let c = run_simulated("t2", &job(50), &sim_tool(), &model(0.1, 0.2), 9, None).unwrap();
        assert_ne!(a.peak_mem_mb, c.peak_mem_mb);
    }

    #[test]
    fn noisy_value_matches_reference_trace() {
        // Oracle: the stream is SplitMix64 seeded with
        // mix64(seed) ^ fnv1a64(task_id); u1 = 1 - U, u2 = U, and
        // g = sqrt(-2 ln u1) cos(2π u2). Computed independently in Python
        // for seed=2024, task "task-7": g = -0.7912374028079242.
        let r = run_simulated("task-7", &job(50), &sim_tool(), &model(0.1, 0.0), 2024, None).unwrap();
        let expected = 200.0 * (1.0 + 0.1 * -0.7912374028079242);
        assert!((r.peak_mem_mb - expected).abs() < 1e-9, "{} vs {expected}", r.peak_mem_mb);
    }

    #[test]
    fn doubling_input_doubles_pure_linear_peak() {
        let m = CostModel::parse("sim:\n  peak_mem_mb: {coeffs: {file_mb: 2}}\n  cpu_seconds: {intercept: 1}\n").unwrap();
        let a = run_simulated("x", &job(40), &sim_tool(), &m, 0, None).unwrap();
        let b = run_simulated("x", &job(80), &sim_tool(), &m, 0, None).unwrap();
        assert_eq!(b.peak_mem_mb, 2.0 * a.peak_mem_mb);
    }

    #[test]
    fn consumption_is_clamped_non_negative() {
        let m = CostModel::parse("sim:\n  peak_mem_mb: {intercept: -500}\n  cpu_seconds: {intercept: 1}\n  noise_sigma: 5\n").unwrap();
        for i in 0..50 {
            let r = run_simulated(&format!("t{i}"), &job(1), &sim_tool(), &m, 3, None).unwrap();
            assert!(r.peak_mem_mb >= 0.0 && r.cpu_seconds >= 0.0);
        }
    }

    #[test]
    fn missing_model_entry() {
        let err = run_simulated("t", &job(1), &sim_tool(), &CostModel::default(), 0, None).unwrap_err();
        assert!(matches!(err, Error::MissingModel(t) if t == "sim"));
    }

    #[test]
    fn invalid_cost_models() {
        assert!(CostModel::parse("sim: {peak_mem_mb: {}, cpu_seconds: {}, failure_rate: 1.0}").is_err());
        assert!(CostModel::parse("sim: {peak_mem_mb: {}, cpu_seconds: {}, noise_sigma: -1}").is_err());
    }

    #[test]
    fn placeholder_outputs_are_materialized() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_simulated("t9", &job(5), &sim_tool(), &model(0.0, 0.0), 0, Some(dir.path())).unwrap();
        let path = Path::new(&r.output_files[0].path);
        assert_eq!(path, dir.path().join("t9/outputs/out.dat"));
        assert_eq!(fs::metadata(path).unwrap().len(), 1 << 20);
    }

    fn local_tool(base: &str, outputs: &str) -> ToolDescriptor {
        parse_tool(&format!(
            "cwlVersion: v1.2\nclass: CommandLineTool\nid: local\nbaseCommand: {base}\ninputs:\n  src: {{type: 'File?', inputBinding: {{position: 1}}}}\noutputs:\n{outputs}\n"
        ))
        .unwrap()
    }

    #[test]
    fn local_true_and_false() {
        let dir = tempfile::tempdir().unwrap();
        let job = JobSpec::new("local", Bindings::new());
        let ok = run_local("a", &job, &local_tool("[\"true\"]", "  []"), dir.path(), None).unwrap();
        assert_eq!(ok.exit_status, 0);
        assert!(ok.output_files.is_empty());
        let fail = run_local("b", &job, &local_tool("[\"false\"]", "  []"), dir.path(), None).unwrap();
        assert_eq!(fail.exit_status, 1);
    }

    #[test]
    fn local_missing_output() {
        let dir = tempfile::tempdir().unwrap();
        let tool = local_tool("[\"true\"]", "  out: {type: File, outputBinding: {glob: '*.out'}}");
        let err = run_local("c", &JobSpec::new("local", Bindings::new()), &tool, dir.path(), None).unwrap_err();
        assert!(matches!(err, Error::MissingOutput { .. }));
    }

    #[test]
    fn local_stages_inputs_and_collects_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("data.txt");
        fs::write(&src, "hello\nworld\n").unwrap();
        let tool = local_tool("[cp]", "  copy: {type: File, outputBinding: {glob: '*.txt'}}");
        // cp <staged input> . -> outputs/data.txt
        let tool = ToolDescriptor { base_command: vec!["cp".into(), "-t".into(), ".".into()], ..tool };
        let job = JobSpec::new(
            "local",
            Bindings::from([("src".into(), ParamValue::File(FileRef::new(src.to_string_lossy())))]),
        );
        let r = run_local("d", &job, &tool, &dir.path().join("work"), None).unwrap();
        assert_eq!(r.exit_status, 0);
        assert_eq!(r.output_files.len(), 1);
        assert_eq!(r.output_files[0].size_bytes, 12);
        assert!(dir.path().join("work/d/inputs/data.txt").exists());
        assert!(r.peak_mem_mb > 0.0);
    }

    #[test]
    fn local_cancel_kills_process() {
        let dir = tempfile::tempdir().unwrap();
        let tool = ToolDescriptor { base_command: vec!["sleep".into(), "30".into()], ..local_tool("[sleep]", "  []") };
        let flag = AtomicBool::new(true);
        let started = Instant::now();
        let r = run_local("e", &JobSpec::new("local", Bindings::new()), &tool, dir.path(), Some(&flag)).unwrap();
        assert!(started.elapsed() < Duration::from_secs(5));
        assert_eq!(r.exit_status, 128 + libc::SIGKILL);
    }

    #[test]
    fn spawn_failure_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let tool = ToolDescriptor {
            base_command: vec!["/nonexistent/binary".into()],
            ..local_tool("[x]", "  []")
        };
        let err = run_local("f", &JobSpec::new("local", Bindings::new()), &tool, dir.path(), None).unwrap_err();
        assert!(matches!(err, Error::Spawn { .. }));
    }
}
