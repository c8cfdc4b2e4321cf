use std::path::PathBuf;

use hetsched_core::cluster::ClusterSpec;
use hetsched_core::executor::CostModel;
use hetsched_core::profiler::DEFAULT_HEADROOM;

/// How placed jobs are executed.
#[derive(Debug, Clone)]
pub enum ExecutionMode {
    /// Cost-model runs. Each job sleeps `time_scale` real seconds per
    /// simulated second before it completes.
    Simulated { cost_models: CostModel, time_scale: f64 },
    /// Real commands in `<work_dir>/<task_id>/`.
    Local,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub state_dir: PathBuf,
    pub work_dir: PathBuf,
    pub cluster: ClusterSpec,
    pub mode: ExecutionMode,
    pub jobs_per_node: u32,
    pub seed: u64,
    pub headroom: f64,
    /// Events between task-table snapshots.
    pub snapshot_every: usize,
}

impl ServiceConfig {
    pub fn new(state_dir: impl Into<PathBuf>, cluster: ClusterSpec, mode: ExecutionMode) -> Self {
        let state_dir = state_dir.into();
        Self {
            work_dir: state_dir.join("work"),
            state_dir,
            cluster,
            mode,
            jobs_per_node: 1,
            seed: 0,
            headroom: DEFAULT_HEADROOM,
            snapshot_every: 200,
        }
    }
}
