use std::path::PathBuf;

use thiserror::Error;

use crate::sparse::Coord;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate coordinate {0}")]
    DuplicateCoord(Coord),

    #[error("coordinate {coord} outside grid bounds {bound:?}")]
    CoordOutOfBounds { coord: Coord, bound: [u32; 3] },

    #[error("coordinate {0} does not fit the 16-bit key packing")]
    CoordOverflow(Coord),

    #[error("invalid kernel size {0}: must be odd and at most 5")]
    InvalidKernel(usize),

    #[error("inverse convolution requires a target coordinate set")]
    MissingTarget,

    #[error("target coordinates are only allowed in inverse mode")]
    UnexpectedTarget,

    #[error("invalid stride {stride} for {mode} convolution")]
    InvalidStride { stride: u32, mode: &'static str },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dense oracle grid of {cells} cells is too large")]
    OracleTooLarge { cells: usize },

    #[error("expected stride {expected}, got {actual}")]
    Stride { expected: u32, actual: u32 },

    #[error("invalid voxel grid: {0}")]
    Grid(String),

    #[error("augmentation error: {0}")]
    Augment(String),

    #[error("label {label} outside 1..={classes}")]
    Label { label: usize, classes: usize },

    #[error("schedule step {step} outside 0..={total}")]
    Schedule { step: usize, total: usize },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint was produced by a different model configuration")]
    ConfigMismatch,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }

    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
