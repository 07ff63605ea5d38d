//! Symbolic dimensions, nodes and the annotated dataflow graph.

mod dfg;
mod node;
mod validate;
mod var;

pub use dfg::Dfg;
pub use node::{Arith, ArithOp, DType, ElementwiseOp, IndexConstraint, Node, NodeId, NodeKind, VirtualBuffer};
pub use validate::{validate, Rule, Violation};
pub use var::{SplitOrigin, SplitPart, Var, VarId};

#[cfg(test)]
mod tests;
