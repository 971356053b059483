use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid geometry: {detail}")]
    InvalidGeometry { op: &'static str, detail: String },

    #[error("backward called on a graph with no recorded forward pass")]
    EmptyGraph,

    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{name} = {value} is outside [{lo}, {hi}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("blend weights must be non-negative and sum to 1, got sum {sum}")]
    NonConvexAlphas { sum: f64 },

    #[error("blend expects {expected} teacher prediction sets, got {found}")]
    TeacherCountMismatch { expected: usize, found: usize },

    #[error("stage {stage}: teacher {teacher} is not an earlier stage of the cascade")]
    UnknownTeacher { stage: usize, teacher: usize },

    #[error("stage {stage}: {detail}")]
    InvalidSchedule { stage: usize, detail: String },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("{}: bad magic at offset 0 (expected {expected:?}, found {found:?})", path.display())]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: Vec<u8>,
    },

    #[error("{}: unsupported format version {found} (supported: {supported})", path.display())]
    UnsupportedVersion {
        path: PathBuf,
        found: u16,
        supported: u16,
    },

    #[error("{}: truncated payload (expected {expected} bytes, found {found})", path.display())]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{}: expected {expected} label columns, found {found}", path.display())]
    LabelColumns {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{}:{line}: {detail}", path.display())]
    LabelFormat {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("architecture mismatch: {detail}")]
    ArchitectureMismatch { detail: String },

    #[error("class count mismatch: model has {model} classes, data has {data}")]
    ClassCountMismatch { model: usize, data: usize },

    #[error("feature dimension mismatch: model expects {expected}, data has {found}")]
    FeatureDimMismatch { expected: usize, found: usize },

    #[error("{0}")]
    Invalid(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
