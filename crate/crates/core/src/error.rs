use alloc::string::String;

use crate::ir::{NodeId, VarId};

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("variable `{name}` must have a positive extent, got {size}")]
    Size { name: String, size: usize },
    #[error("incompatible dimensions: {0}")]
    IncompatibleDims(String),
    #[error("index expression rejected: {0}")]
    Index(String),
    #[error("unknown variable {0:?}")]
    UnknownVar(VarId),
    #[error("unknown variable name `{0}`")]
    UnknownVarName(String),
    #[error("variable name `{0}` is ambiguous")]
    AmbiguousVarName(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("new order for node {0} is not a permutation of its loop variables")]
    NotAPermutation(NodeId),
    #[error("dataflow graph contains a cycle through node {0}")]
    Cycle(NodeId),
    #[error("node {0} has no consumer")]
    NoConsumer(NodeId),
    #[error("graph failed validation: {0}")]
    Invalid(String),
    #[error("register block does not fit: {needed} registers needed, {available} available")]
    BlockTooLarge { needed: usize, available: usize },
    #[error("shape mismatch for slot {slot}: expected {expected} elements, got {got}")]
    ShapeMismatch { slot: usize, expected: usize, got: usize },
    #[error("missing buffer for slot {0}")]
    MissingSlot(usize),
    #[error("single-operand nest has a reduction at node {0}")]
    HasReduction(NodeId),
    #[error("single-operand nest needs exactly one input, found {0}")]
    NotSingleOperand(usize),
    #[error("split factor must be positive")]
    ZeroFactor,
    #[error("unroll limit must be positive")]
    ZeroUnroll,
    #[error("variable {var:?} is not in the loop order of node {node}")]
    NotInOrder { node: NodeId, var: VarId },
}
