use alloc::vec::Vec;
use core::fmt;

use super::VarId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DType {
    #[default]
    F32,
}

/// Binary operator of an arithmetic node. The same operator combines the
/// node's inputs and folds over its reduction dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ArithOp {
    Add,
    Mul,
    Max,
    Min,
}

impl ArithOp {
    pub fn identity(self) -> f32 {
        match self {
            ArithOp::Add => 0.0,
            ArithOp::Mul => 1.0,
            ArithOp::Max => f32::NEG_INFINITY,
            ArithOp::Min => f32::INFINITY,
        }
    }

    #[inline]
    pub fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            ArithOp::Add => a + b,
            ArithOp::Mul => a * b,
            ArithOp::Max => a.max(b),
            ArithOp::Min => a.min(b),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ArithOp::Add => "add",
            ArithOp::Mul => "mul",
            ArithOp::Max => "max",
            ArithOp::Min => "min",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ElementwiseOp {
    #[default]
    Identity,
    Relu,
    Sigmoid,
}

impl ElementwiseOp {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            ElementwiseOp::Identity => x,
            ElementwiseOp::Relu => x.max(0.0),
            ElementwiseOp::Sigmoid => 1.0 / (1.0 + libm::expf(-x)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementwiseOp::Identity => "identity",
            ElementwiseOp::Relu => "relu",
            ElementwiseOp::Sigmoid => "sigmoid",
        }
    }
}

/// `out = post(fold_op(init, beta * term))` where `term` combines all
/// (non-init) inputs with `op` at one iteration point and the fold runs over
/// the reduction dimensions. `init` is `alpha * pre(C_in)` when `init` is
/// set (the last input is `C_in`), otherwise the identity of `op`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Arith {
    pub op: ArithOp,
    pub pre: ElementwiseOp,
    pub post: ElementwiseOp,
    pub alpha: f32,
    pub beta: f32,
    pub init: bool,
}

impl Arith {
    pub fn new(op: ArithOp) -> Self {
        Arith {
            op,
            pre: ElementwiseOp::Identity,
            post: ElementwiseOp::Identity,
            alpha: 0.0,
            beta: 1.0,
            init: false,
        }
    }

    pub fn with_post(mut self, post: ElementwiseOp) -> Self {
        self.post = post;
        self
    }
}

/// `input_dim = sum(coeff * iter(var)) + offset`.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IndexConstraint {
    pub input_dim: VarId,
    pub terms: Vec<(VarId, i64)>,
    pub offset: i64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum NodeKind {
    Read { slot: usize },
    Write { slot: usize },
    Arith(Arith),
    /// Out-of-range accesses read `fill`.
    View { constraints: Vec<IndexConstraint>, fill: f32 },
}

impl NodeKind {
    pub fn is_read(&self) -> bool {
        matches!(self, NodeKind::Read { .. })
    }

    pub fn is_write(&self) -> bool {
        matches!(self, NodeKind::Write { .. })
    }

    pub fn arith(&self) -> Option<&Arith> {
        match self {
            NodeKind::Arith(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VirtualBuffer {
    pub dims: Vec<VarId>,
    pub dtype: DType,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub output: VirtualBuffer,
    /// Loop order, outermost first, over the node's leaf (fully split) variables.
    pub order: Vec<VarId>,
    /// Sorted, deduplicated.
    pub staged: Vec<VarId>,
}

impl Node {
    pub fn dims(&self) -> &[VarId] {
        &self.output.dims
    }

    pub fn is_staged(&self, v: VarId) -> bool {
        self.staged.binary_search(&v).is_ok()
    }
}
