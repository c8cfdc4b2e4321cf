use std::path::PathBuf;

use crate::tasks::TaskState;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid document: {0}")]
    Invalid(String),
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("unknown node class `{0}`")]
    UnknownClass(String),
    #[error("negative capacity in node class `{0}`")]
    NegativeCapacity(String),
    #[error("duplicate cost_rank {0}")]
    DuplicateCostRank(u32),
    #[error("allocating {demand} on node `{node}` exceeds its free capacity")]
    OverAllocation { node: String, demand: String },
    #[error("releasing {demand} on node `{node}` exceeds its allocation")]
    OverRelease { node: String, demand: String },
    #[error("not found: {0}")]
    NotFound(String),

    #[error("unknown document class `{0}`")]
    UnknownDocumentClass(String),
    #[error("unsupported cwlVersion `{0}`")]
    UnsupportedCwlVersion(String),
    #[error("input `{input}` has unsupported type `{ty}`")]
    UnsupportedType { input: String, ty: String },
    #[error("missing or empty baseCommand")]
    MissingBaseCommand,
    #[error("missing required input `{0}`")]
    MissingRequiredInput(String),
    #[error("input `{input}`: {message}")]
    TypeMismatch { input: String, message: String },
    #[error("unknown input `{0}`")]
    UnknownInput(String),

    #[error("step `{step}` references unresolved source `{source_ref}`")]
    UnresolvedSource { step: String, source_ref: String },
    #[error("workflow contains a cycle through step `{0}`")]
    Cycle(String),
    #[error("cannot resolve tool reference `{0}`")]
    UnresolvedTool(String),
    #[error("upstream output `{0}` is not available yet")]
    MissingUpstream(String),

    #[error("no cost model entry for tool `{0}`")]
    MissingModel(String),
    #[error("failed to spawn `{command}`: {message}")]
    Spawn { command: String, message: String },
    #[error("declared output `{output}` matched nothing for glob `{glob}`")]
    MissingOutput { output: String, glob: String },

    #[error("profiling grid of {size} runs exceeds max_runs {max}")]
    GridTooLarge { size: u128, max: usize },
    #[error("no node class can host any of the profiling samples")]
    AllSamplesUnlabelable,
    #[error("profiling produced no samples")]
    EmptyDataset,
    #[error("training needs at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error("runner unavailable: {0}")]
    RunnerUnavailable(String),

    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("dataset contains a single class")]
    DegenerateData,
    #[error("training loss became non-finite; check feature scaling")]
    NonFiniteLoss,
    #[error("feature dimension mismatch: profile expects {expected}, got {got}")]
    FeatureMismatch { expected: usize, got: usize },

    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{task}`: illegal transition {from} -> {to}")]
    IllegalTransition { task: String, from: TaskState, to: TaskState },
    #[error("task `{task}` is {state}, not COMPLETE")]
    TaskNotComplete { task: String, state: TaskState },
    #[error("payload file missing: {}", .0.display())]
    MissingPayload(PathBuf),
    #[error("report window is empty")]
    EmptyWindow,

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Whether the error was caused by the caller's input rather than the system.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Spawn { .. } | Error::RunnerUnavailable(_))
    }
}
