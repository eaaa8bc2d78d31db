use std::fmt;

use thiserror::Error;

/// Identifies a node inside a [`crate::autograd::Graph`] for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub id: usize,
    pub op: &'static str,
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{} ({})", self.id, self.op)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor shape {shape:?} holds {expected} values but {actual} were supplied")]
    TensorSize {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch at node {node}: expected {expected}, got {actual}")]
    ShapeMismatch {
        node: NodeRef,
        expected: String,
        actual: String,
    },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("parameter `{0}` is not present")]
    UnknownParameter(String),

    #[error("node {0} produced a non-finite value")]
    NonFinite(NodeRef),

    #[error("backward needs a scalar output of shape [1], node {node} has shape {shape:?}")]
    NonScalarOutput { node: NodeRef, shape: Vec<usize> },

    #[error("graph has not been evaluated (the evaluation was produced by a different graph)")]
    NotEvaluated,

    #[error("finite-difference objective is not finite at coordinate {0}")]
    NonFiniteObjective(usize),

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("function has no tokens")]
    EmptyFunction,

    #[error("context size {0} is too small (minimum is 8)")]
    ContextTooSmall(usize),

    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),

    #[error("next-token loss has no unmasked target positions")]
    EmptyMask,

    #[error("scored set needs at least one positive and one negative")]
    SingleClass,

    #[error("malformed commit record `{commit}`: {reason}")]
    MalformedCommit { commit: String, reason: String },

    #[error("non-finite loss on {sequence}")]
    NonFiniteLoss { sequence: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
