use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph is in inference mode; nothing was recorded")]
    InferenceMode,
    #[error("graph has already been consumed by a backward pass")]
    GraphConsumed,
    #[error("tensor belongs to a different graph")]
    ForeignTensor,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty bag")]
    EmptyBag,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("AUROC undefined: {0}")]
    UndefinedAuroc(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("bad magic number in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    UnsupportedVersion { path: PathBuf, found: u16, supported: u16 },
    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },
    #[error("malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("invalid data spec: {0}")]
    DataSpec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::DataSpec(_)
            | Error::DatasetNotFound(_)
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::Malformed { .. }
            | Error::Io { .. }
            | Error::EmptyBag
            | Error::LabelOutOfRange { .. } => 3,
            Error::NonFinite(_) | Error::NonFiniteGradient(_) => 4,
            _ => 1,
        }
    }
}
