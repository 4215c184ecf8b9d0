//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Variants are grouped by
//! the layer that raises them; [`Error::exit_code`] maps them onto the CLI
//! contract (1 = configuration / validation, 2 = runtime failure).

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ---- numerics ----
    #[error("shape mismatch in `{op}`: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("`{op}` expects {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("data length {got} does not match shape {shape:?} (= {expected} elements)")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },

    #[error("domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}`{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        context: Option<String>,
    },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("variable does not belong to this tape (id {id}, tape has {len} nodes)")]
    ForeignVar { id: usize, len: usize },

    // ---- paths / schedules ----
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("time {t} outside [0, 1]")]
    TimeOutOfRange { t: f64 },

    #[error("step index {index} out of range for schedule with {len} steps")]
    StepOutOfRange { index: usize, len: usize },

    // ---- models / conditioning ----
    #[error("invalid model configuration: {0}")]
    InvalidModelConfig(String),

    #[error("condition rejected: {0}")]
    BadCondition(String),

    #[error("class index {index} out of range ({num_classes} classes)")]
    ClassOutOfRange { index: usize, num_classes: usize },

    // ---- checkpoints ----
    #[error("checkpoint `{path}`: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("checkpoint architecture mismatch: {0}")]
    CheckpointMismatch(String),

    // ---- samplers ----
    #[error("sampler `{family}` is incompatible with a model trained on path `{path}`")]
    SamplerPathMismatch { family: String, path: String },

    #[error("invalid sampler configuration: {0}")]
    InvalidSampler(String),

    // ---- datasets ----
    #[error("invalid dataset parameters: {0}")]
    InvalidDataset(String),

    #[error("dataset file `{path}`: {detail}")]
    DatasetIo { path: PathBuf, detail: String },

    // ---- metrics ----
    #[error("metric `{metric}` needs {need}, got {got}")]
    InsufficientSamples {
        metric: &'static str,
        need: String,
        got: usize,
    },

    #[error("invalid metric parameters: {0}")]
    InvalidMetric(String),

    // ---- training ----
    #[error("invalid training configuration: {0}")]
    InvalidTrainConfig(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    // ---- config / CLI ----
    #[error("config error: {0}")]
    Config(String),

    #[error("config `{path}`: {detail}")]
    ConfigFile { path: PathBuf, detail: String },

    #[error("io error on `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 1 for configuration/validation errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::ConfigFile { .. }
            | Error::InvalidTrainConfig(_)
            | Error::InvalidModelConfig(_)
            | Error::InvalidSampler(_)
            | Error::InvalidDataset(_)
            | Error::InvalidMetric(_)
            | Error::InvalidSchedule(_)
            | Error::BadCondition(_)
            | Error::ClassOutOfRange { .. }
            | Error::SamplerPathMismatch { .. }
            | Error::CheckpointMismatch(_)
            | Error::Checkpoint { .. }
            | Error::DatasetIo { .. } => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Io error on a stream with no filesystem path.
    pub(crate) fn from_io(source: std::io::Error) -> Self {
        Error::Io {
            path: PathBuf::from("<stream>"),
            source,
        }
    }
}
