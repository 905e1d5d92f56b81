use std::io;

use thiserror::Error;

use crate::graph::{Modality, Space};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("unknown op `{0}`")]
    UnknownOp(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("loss variable was not recorded on this tape")]
    LossNotOnTape,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("modality {modality} cannot reach space {space} in the {topology} graph")]
    UnreachablePair {
        modality: Modality,
        space: Space,
        topology: &'static str,
    },

    #[error("embedding spaces differ: {0} vs {1}")]
    SpaceMismatch(Space, Space),

    #[error("task `{task}` is not available for the {topology} graph")]
    UnreachableTask { task: String, topology: &'static str },

    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocabulary { id: u32, vocab: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
