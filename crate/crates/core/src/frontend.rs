//! Einstein-notation style construction of dataflow graphs.
//!
//! ```
//! use looptree_core::frontend::{Builder, Index};
//! use looptree_core::ir::ArithOp;
//!
//! let mut g = Builder::new();
//! let (m, n, k) = (g.var("m", 4).unwrap(), g.var("n", 4).unwrap(), g.var("k", 4).unwrap());
//! let a = g.input(&[m, k]);
//! let b = g.input(&[k, n]);
//! let c = g
//!     .contract(&[m, n], &[a.at(&[m, k]), b.at(&[k, n])], (ArithOp::Add, ArithOp::Mul))
//!     .unwrap();
//! g.output(c);
//! let dfg = g.finish();
//! assert!(looptree_core::ir::validate(&dfg).is_empty());
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ir::{
    Arith, ArithOp, DType, Dfg, ElementwiseOp, IndexConstraint, Node, NodeId, NodeKind, VarId, VirtualBuffer,
};

/// Handle to a node whose output can be indexed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor(pub NodeId);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Index {
    Var(VarId),
    Affine { terms: Vec<(VarId, i64)>, offset: i64 },
}

impl From<VarId> for Index {
    fn from(v: VarId) -> Self {
        Index::Var(v)
    }
}

/// `sum(coeff * var) + offset` as an index slot.
pub fn affine(terms: &[(VarId, i64)], offset: i64) -> Index {
    Index::Affine { terms: terms.to_vec(), offset }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorExpr {
    pub tensor: Tensor,
    pub index: Vec<Index>,
}

impl Tensor {
    pub fn at(self, vars: &[VarId]) -> TensorExpr {
        TensorExpr { tensor: self, index: vars.iter().map(|v| Index::Var(*v)).collect() }
    }

    pub fn at_index(self, index: Vec<Index>) -> TensorExpr {
        TensorExpr { tensor: self, index }
    }
}

/// Optional parts of a generalized contraction.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractOptions {
    pub alpha: f32,
    pub beta: f32,
    pub init: Option<TensorExpr>,
    pub pre: ElementwiseOp,
    pub post: ElementwiseOp,
}

impl Default for ContractOptions {
    fn default() -> Self {
        ContractOptions { alpha: 0.0, beta: 1.0, init: None, pre: ElementwiseOp::Identity, post: ElementwiseOp::Identity }
    }
}

#[derive(Debug, Default)]
pub struct Builder {
    dfg: Dfg,
    next_slot: usize,
}

impl Builder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dfg(&self) -> &Dfg {
        &self.dfg
    }

    pub fn finish(self) -> Dfg {
        self.dfg
    }

    pub fn var(&mut self, name: &str, size: usize) -> Result<VarId> {
        self.dfg.add_var(name, size)
    }

    pub fn dims(&self, t: Tensor) -> &[VarId] {
        self.dfg.node(t.0).dims()
    }

    fn push(&mut self, kind: NodeKind, inputs: Vec<NodeId>, dims: Vec<VarId>) -> NodeId {
        let id = self.dfg.next_node_id();
        let mut node = Node {
            id,
            kind,
            inputs,
            output: VirtualBuffer { dims, dtype: DType::F32 },
            order: Vec::new(),
            staged: Vec::new(),
        };
        node.order = self.dfg.default_order(&node);
        self.dfg.insert_node(node);
        id
    }

    /// External input tensor with the given row-major layout.
    pub fn input(&mut self, dims: &[VarId]) -> Tensor {
        let slot = self.next_slot;
        self.next_slot += 1;
        Tensor(self.push(NodeKind::Read { slot }, Vec::new(), dims.to_vec()))
    }

    /// Bind `t` to a fresh external output slot, keeping its layout.
    pub fn output(&mut self, t: Tensor) -> NodeId {
        let dims = self.dims(t).to_vec();
        self.output_as(t, &dims).expect("same dims")
    }

    /// Bind `t` to an output slot with a permuted layout.
    pub fn output_as(&mut self, t: Tensor, dims: &[VarId]) -> Result<NodeId> {
        let mut a = self.dims(t).to_vec();
        let mut b = dims.to_vec();
        a.sort();
        b.sort();
        if a != b {
            return Err(Error::IncompatibleDims(format!("output layout must permute {:?}", self.dims(t))));
        }
        let slot = self.next_slot;
        self.next_slot += 1;
        Ok(self.push(NodeKind::Write { slot }, vec![t.0], dims.to_vec()))
    }

    fn check_bounds(&self, input_dim: VarId, terms: &[(VarId, i64)], offset: i64) -> Result<()> {
        if terms.len() > 2 {
            return Err(Error::Index(format!("at most two terms per index, got {}", terms.len())));
        }
        let lo = offset;
        let mut hi = offset;
        for &(v, c) in terms {
            if c < 0 {
                return Err(Error::Index(format!("negative coefficient {c}")));
            }
            hi += c * (self.dfg.size(v) as i64 - 1);
        }
        let extent = self.dfg.size(input_dim) as i64;
        if lo < 0 || hi >= extent {
            return Err(Error::Index(format!(
                "access range [{lo}, {hi}] leaves dimension `{}` of extent {extent}",
                self.dfg.name(input_dim)
            )));
        }
        Ok(())
    }

    /// Materialize an indexed expression as a node, inserting a view when
    /// the index is not the tensor's own dimension list.
    fn resolve(&mut self, e: &TensorExpr) -> Result<NodeId> {
        let dims = self.dfg.try_node(e.tensor.0)?.dims().to_vec();
        if dims.len() != e.index.len() {
            return Err(Error::IncompatibleDims(format!(
                "{} indexed with {} slots but has rank {}",
                e.tensor.0,
                e.index.len(),
                dims.len()
            )));
        }
        if e.index.iter().zip(&dims).all(|(i, d)| *i == Index::Var(*d)) {
            return Ok(e.tensor.0);
        }
        let mut out_dims: Vec<VarId> = Vec::new();
        let mut constraints = Vec::new();
        for (slot, &d) in e.index.iter().zip(&dims) {
            match slot {
                Index::Var(v) if *v == d => {
                    if out_dims.contains(v) {
                        return Err(Error::IncompatibleDims(format!("`{}` indexed twice", self.dfg.name(*v))));
                    }
                    out_dims.push(*v);
                }
                Index::Var(v) => {
                    if self.dfg.size(*v) != self.dfg.size(d) {
                        return Err(Error::IncompatibleDims(format!(
                            "`{}` has extent {} but indexes `{}` of extent {}",
                            self.dfg.name(*v),
                            self.dfg.size(*v),
                            self.dfg.name(d),
                            self.dfg.size(d)
                        )));
                    }
                    if !out_dims.contains(v) {
                        out_dims.push(*v);
                    }
                    constraints.push(IndexConstraint { input_dim: d, terms: vec![(*v, 1)], offset: 0 });
                }
                Index::Affine { terms, offset } => {
                    self.check_bounds(d, terms, *offset)?;
                    for (v, _) in terms {
                        if !out_dims.contains(v) {
                            out_dims.push(*v);
                        }
                    }
                    constraints.push(IndexConstraint { input_dim: d, terms: terms.clone(), offset: *offset });
                }
            }
        }
        Ok(self.push(NodeKind::View { constraints, fill: 0.0 }, vec![e.tensor.0], out_dims))
    }

    fn combined_dims(&self, a: NodeId, b: NodeId) -> Vec<VarId> {
        let mut dims = self.dfg.node(a).dims().to_vec();
        for d in self.dfg.node(b).dims() {
            if !dims.contains(d) {
                dims.push(*d);
            }
        }
        dims
    }

    /// `lhs = rhs[0] ⊗ rhs[1] ⊗ ...` reduced with `⊕` over every variable
    /// not named in `lhs`.
    pub fn contract(&mut self, lhs: &[VarId], rhs: &[TensorExpr], ops: (ArithOp, ArithOp)) -> Result<Tensor> {
        self.contract_with(lhs, rhs, ops, ContractOptions::default())
    }

    pub fn contract_with(
        &mut self,
        lhs: &[VarId],
        rhs: &[TensorExpr],
        (sum, product): (ArithOp, ArithOp),
        opts: ContractOptions,
    ) -> Result<Tensor> {
        if rhs.is_empty() {
            return Err(Error::IncompatibleDims("contraction needs at least one operand".into()));
        }
        for (i, v) in lhs.iter().enumerate() {
            self.dfg.try_var(*v)?;
            if lhs[..i].contains(v) {
                return Err(Error::IncompatibleDims(format!("`{}` repeated on the left", self.dfg.name(*v))));
            }
        }
        let mut operands = Vec::with_capacity(rhs.len());
        for e in rhs {
            operands.push(self.resolve(e)?);
        }
        let init = match &opts.init {
            Some(e) => {
                let id = self.resolve(e)?;
                let mut a = self.dfg.node(id).dims().to_vec();
                let mut b = lhs.to_vec();
                a.sort();
                b.sort();
                if a != b {
                    return Err(Error::IncompatibleDims("initial value must have the output dims".into()));
                }
                Some(id)
            }
            None => None,
        };
        if init.is_none() && opts.alpha != 0.0 {
            return Err(Error::IncompatibleDims("alpha needs an initial value".into()));
        }

        let mut acc = operands[0];
        for &next in &operands[1..] {
            let dims = self.combined_dims(acc, next);
            acc = self.push(NodeKind::Arith(Arith::new(product)), vec![acc, next], dims);
        }

        let trivial = operands.len() == 1
            && init.is_none()
            && opts.beta == 1.0
            && opts.post == ElementwiseOp::Identity
            && self.dfg.node(acc).dims() == lhs;
        if trivial {
            return Ok(Tensor(acc));
        }
        let mut inputs = vec![acc];
        inputs.extend(init);
        let arith = Arith {
            op: sum,
            pre: opts.pre,
            post: opts.post,
            alpha: opts.alpha,
            beta: opts.beta,
            init: init.is_some(),
        };
        Ok(Tensor(self.push(NodeKind::Arith(arith), inputs, lhs.to_vec())))
    }

    /// Raw arithmetic node over existing tensors. Variables of the inputs
    /// that are missing from `dims` are reduced with `arith.op`.
    pub fn arith(&mut self, arith: Arith, inputs: &[Tensor], dims: &[VarId]) -> Result<Tensor> {
        for t in inputs {
            self.dfg.try_node(t.0)?;
        }
        for d in dims {
            self.dfg.try_var(*d)?;
        }
        let inputs = inputs.iter().map(|t| t.0).collect();
        Ok(Tensor(self.push(NodeKind::Arith(arith), inputs, dims.to_vec())))
    }

    /// Explicit view of `t` over `dims`: each constrained input dimension is
    /// addressed by its affine expression, the others by themselves.
    /// Out-of-range reads yield `fill` (padding).
    pub fn view(&mut self, t: Tensor, constraints: Vec<IndexConstraint>, dims: &[VarId], fill: f32) -> Result<Tensor> {
        self.dfg.try_node(t.0)?;
        for d in dims {
            self.dfg.try_var(*d)?;
        }
        Ok(Tensor(self.push(NodeKind::View { constraints, fill }, vec![t.0], dims.to_vec())))
    }

    /// Elementwise unary function of an expression.
    pub fn map(&mut self, e: &TensorExpr, op: ElementwiseOp) -> Result<Tensor> {
        let input = self.resolve(e)?;
        let dims = self.dfg.node(input).dims().to_vec();
        Ok(Tensor(self.push(NodeKind::Arith(Arith::new(ArithOp::Add).with_post(op)), vec![input], dims)))
    }

    /// Concatenate `parts` along their own variable, producing `out` in its place.
    pub fn concat(&mut self, parts: &[(Tensor, VarId)], out: VarId) -> Result<Tensor> {
        let Some(&(first, first_dim)) = parts.first() else {
            return Err(Error::IncompatibleDims("concat of zero parts".into()));
        };
        let template = self.dfg.try_node(first.0)?.dims().to_vec();
        let Some(axis) = template.iter().position(|d| *d == first_dim) else {
            return Err(Error::IncompatibleDims("concat dimension is not a dimension of the part".into()));
        };
        let mut offsets = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &(t, d) in parts {
            let dims = self.dfg.try_node(t.0)?.dims();
            let same_shape = dims.len() == template.len()
                && dims.iter().zip(&template).enumerate().all(|(i, (a, b))| if i == axis { *a == d } else { a == b });
            if !same_shape {
                return Err(Error::IncompatibleDims("concat parts disagree outside the concat dimension".into()));
            }
            offsets.push(total);
            total += self.dfg.size(d);
        }
        if total != self.dfg.try_var(out)?.size {
            return Err(Error::IncompatibleDims(format!(
                "concat of total extent {total} into `{}` of extent {}",
                self.dfg.name(out),
                self.dfg.size(out)
            )));
        }
        let mut out_dims = template.clone();
        out_dims[axis] = out;
        let mut views = Vec::with_capacity(parts.len());
        for (&(t, d), &off) in parts.iter().zip(&offsets) {
            let c = IndexConstraint { input_dim: d, terms: vec![(out, 1)], offset: -(off as i64) };
            views.push(self.push(NodeKind::View { constraints: vec![c], fill: 0.0 }, vec![t.0], out_dims.clone()));
        }
        let mut acc = views[0];
        for &v in &views[1..] {
            acc = self.push(NodeKind::Arith(Arith::new(ArithOp::Add)), vec![acc, v], out_dims.clone());
        }
        Ok(Tensor(acc))
    }
}
