use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numeric failure in {0}")]
    Numeric(String),

    #[error("batch norm needs at least 2 rows in train mode, got {0}")]
    BatchTooSmall(usize),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("cannot normalize a zero-norm vector ({0})")]
    DegenerateNorm(&'static str),

    #[error("point cloud is degenerate: all points coincide")]
    DegenerateCloud,

    #[error("crop keeps {kept} of {total} points, need at least 4")]
    Crop { kept: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("prototype {column} lost its mass (column sum {mass:e})")]
    DeadPrototype { column: usize, mass: f64 },

    #[error("problem of size {n}x{j} is beyond enumeration scale (max 6x4)")]
    Scale { n: usize, j: usize },

    #[error("bad checkpoint: {0}")]
    Format(String),

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("cloud {index}: {source}")]
    AtCloud {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("step {step}: non-finite gradient for {param}")]
    NonFiniteGradient { step: u64, param: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_cloud(self, index: usize) -> Self {
        Error::AtCloud {
            index,
            source: Box::new(self),
        }
    }
}
