//! Static decisions made before emission: where every node's values live,
//! which values travel in registers, which loops are vectorized, and the
//! candidate register blocks of each reduction.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use super::program::{BufKind, BufferDecl};
use super::target::TargetDescriptor;
use super::trip::trip_counts;
use crate::error::{Error, Result};
use crate::ir::{Arith, ArithOp, Dfg, ElementwiseOp, NodeId, NodeKind, VarId};
use crate::lower::{Digit, DigitIndex, Item, LoopId, LoopTree};

/// Address in terms of loop variables: `base + sum(coeff * iter(var))`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub(crate) struct SymAddr {
    pub base: i64,
    pub terms: Vec<(VarId, i64)>,
}

impl SymAddr {
    pub fn add(&mut self, v: VarId, c: i64) {
        if c == 0 {
            return;
        }
        match self.terms.binary_search_by_key(&v, |t| t.0) {
            Ok(i) => {
                self.terms[i].1 += c;
                if self.terms[i].1 == 0 {
                    self.terms.remove(i);
                }
            }
            Err(i) => self.terms.insert(i, (v, c)),
        }
    }

    pub fn add_scaled(&mut self, o: &SymAddr, k: i64) {
        self.base += o.base * k;
        for &(v, c) in &o.terms {
            self.add(v, c * k);
        }
    }

    pub fn coeff(&self, v: VarId) -> i64 {
        self.terms.binary_search_by_key(&v, |t| t.0).map_or(0, |i| self.terms[i].1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Operand {
    Fwd(NodeId),
    Mem { buf: u16, addr: SymAddr },
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum LeafOp {
    /// Aliased reads and writes, and multiplies folded into their consumer.
    Skip,
    Copy { src: Operand, guards: Vec<(SymAddr, i64)>, fill: f32 },
    Compute { arith: Arith, data: Vec<Operand>, fma: Option<(Operand, Operand)>, cin: Option<Operand>, reduces: bool },
}

#[derive(Clone, Debug)]
pub(crate) struct LeafPlan {
    pub node: NodeId,
    pub op: LeafOp,
    pub dst: Option<(u16, SymAddr)>,
    pub forward: bool,
    /// Forwarded values whose last reader is this leaf.
    pub free_after: Vec<NodeId>,
    /// Registers a single statement of this leaf may need beyond forwarded values.
    pub need: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockPlan {
    pub leaf: usize,
    pub path: Vec<LoopId>,
    /// Output leaf variables of the node.
    pub outputs: BTreeSet<VarId>,
    /// Legal block depths, outermost first; `path.len()` is the leaf itself.
    pub candidates: Vec<usize>,
    pub choice: usize,
}

impl BlockPlan {
    pub fn depth(&self) -> usize {
        self.candidates[self.choice]
    }

    /// Loops that must be unrolled so every accumulator has a fixed register.
    pub fn forced(&self, tree: &LoopTree) -> Vec<LoopId> {
        self.path[self.depth()..].iter().copied().filter(|l| self.outputs.contains(&tree.loop_(*l).var)).collect()
    }

    /// Reduction loops outside the block: accumulators travel through memory across them.
    pub fn flag_loops(&self, tree: &LoopTree) -> Vec<LoopId> {
        self.path[..self.depth()].iter().copied().filter(|l| !self.outputs.contains(&tree.loop_(*l).var)).collect()
    }
}

pub(crate) struct Plan {
    pub leaves: Vec<LeafPlan>,
    pub buffers: Vec<BufferDecl>,
    pub vector: Vec<bool>,
    /// Loops whose subtree emits nothing.
    pub empty: Vec<bool>,
    pub blocks: BTreeMap<NodeId, BlockPlan>,
}

impl Plan {
    /// Move `node`'s block one candidate deeper; false when none is left.
    pub fn deepen(&mut self, node: NodeId) -> bool {
        match self.blocks.get_mut(&node) {
            Some(b) if b.choice + 1 < b.candidates.len() => {
                b.choice += 1;
                true
            }
            _ => false,
        }
    }
}

fn root_sym(dfg: &Dfg, d: VarId) -> SymAddr {
    let mut s = SymAddr::default();
    for l in dfg.leaves(d) {
        s.add(l, dfg.root_coeff(l));
    }
    s
}

fn row_major(dfg: &Dfg, dims: &[VarId]) -> Vec<Digit> {
    let mut stride: usize = dims.iter().map(|d| dfg.size(*d)).product();
    dims.iter()
        .map(|&d| {
            let extent = dfg.size(d);
            stride /= extent;
            Digit { index: DigitIndex::Root(d), extent, stride }
        })
        .collect()
}

struct Storage {
    buf: u16,
    layout: Vec<Digit>,
}

pub(crate) fn plan(tree: &LoopTree, target: &TargetDescriptor) -> Result<Plan> {
    let dfg = &tree.dfg;
    let mut buffers: Vec<BufferDecl> = Vec::new();
    let mut storage: BTreeMap<NodeId, Storage> = BTreeMap::new();
    let mut skip: BTreeSet<NodeId> = BTreeSet::new();

    // external inputs: unstaged reads alias them directly
    let mut input_buf: BTreeMap<usize, u16> = BTreeMap::new();
    for n in dfg.nodes() {
        if let NodeKind::Read { slot } = n.kind {
            let b = *input_buf.entry(slot).or_insert_with(|| {
                buffers.push(BufferDecl { kind: BufKind::Input(slot), len: dfg.elements(n.dims()), node: n.id });
                (buffers.len() - 1) as u16
            });
            if n.staged.is_empty() {
                storage.insert(n.id, Storage { buf: b, layout: row_major(dfg, n.dims()) });
                skip.insert(n.id);
            }
        }
    }
    let mut output_buf: BTreeMap<NodeId, u16> = BTreeMap::new();
    for n in dfg.nodes() {
        if let NodeKind::Write { slot } = n.kind {
            buffers.push(BufferDecl { kind: BufKind::Output(slot), len: dfg.elements(n.dims()), node: n.id });
            let b = (buffers.len() - 1) as u16;
            output_buf.insert(n.id, b);
            let p = n.inputs[0];
            if let alloc::collections::btree_map::Entry::Vacant(e) = storage.entry(p) {
                // the producer computes straight into the output
                e.insert(Storage { buf: b, layout: row_major(dfg, n.dims()) });
                skip.insert(n.id);
            }
        }
    }

    // register forwarding: size-1 intermediates whose consumers sit in the same loop body
    let parent_of = |leaf: usize| tree.leaves[leaf].path.last().copied();
    let leaf_index: BTreeMap<NodeId, usize> = tree.leaves.iter().enumerate().map(|(i, l)| (l.node, i)).collect();
    let mut forward: BTreeSet<NodeId> = BTreeSet::new();
    for (i, leaf) in tree.leaves.iter().enumerate() {
        let n = dfg.node(leaf.node);
        if storage.contains_key(&n.id) || n.kind.is_write() {
            continue;
        }
        let Some(alloc) = &leaf.alloc else { continue };
        let parent = parent_of(i);
        let consumers = dfg.consumers(n.id);
        if alloc.size == 1
            && parent.is_some()
            && alloc.at == parent
            && dfg.reduction_dims(n).is_empty()
            && consumers.iter().all(|c| parent_of(leaf_index[c]) == parent)
        {
            forward.insert(n.id);
        }
    }
    for leaf in &tree.leaves {
        let n = dfg.node(leaf.node);
        if storage.contains_key(&n.id) || forward.contains(&n.id) || n.kind.is_write() {
            continue;
        }
        let alloc = leaf.alloc.as_ref().ok_or(Error::NoConsumer(n.id))?;
        buffers.push(BufferDecl { kind: BufKind::Scratch, len: alloc.size, node: n.id });
        storage.insert(n.id, Storage { buf: (buffers.len() - 1) as u16, layout: alloc.layout.clone() });
    }

    // multiply feeding an accumulation folds into a fused multiply-add
    let mut fused: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    for n in dfg.nodes() {
        let Some(a) = n.kind.arith() else { continue };
        if a.op != ArithOp::Add || a.beta != 1.0 || dfg.reduction_dims(n).is_empty() {
            continue;
        }
        let data = &n.inputs[..n.inputs.len() - usize::from(a.init)];
        if data.len() != 1 || !forward.contains(&data[0]) {
            continue;
        }
        let q = dfg.node(data[0]);
        let Some(qa) = q.kind.arith() else { continue };
        if qa.op == ArithOp::Mul
            && qa.beta == 1.0
            && !qa.init
            && qa.post == ElementwiseOp::Identity
            && q.inputs.len() == 2
            && dfg.consumers(q.id).len() == 1
        {
            fused.insert(q.id, n.id);
        }
    }

    let address = |q: NodeId, reader: NodeId| -> Result<Option<Operand>> {
        if forward.contains(&q) {
            return Ok(Some(Operand::Fwd(q)));
        }
        let Some(st) = storage.get(&q) else { return Ok(None) };
        let r = dfg.node(reader);
        let constraints = match &r.kind {
            NodeKind::View { constraints, .. } => constraints.as_slice(),
            _ => &[],
        };
        let mut addr = SymAddr::default();
        for dg in &st.layout {
            match dg.index {
                DigitIndex::Root(d) => {
                    if let Some(c) = constraints.iter().find(|c| c.input_dim == d) {
                        let mut e = SymAddr { base: c.offset, terms: Vec::new() };
                        for &(w, k) in &c.terms {
                            e.add_scaled(&root_sym(dfg, w), k);
                        }
                        addr.add_scaled(&e, dg.stride as i64);
                    } else {
                        addr.add_scaled(&root_sym(dfg, d), dg.stride as i64);
                    }
                }
                DigitIndex::Leaf(u) => {
                    let root = dfg.root_of(u);
                    if constraints.iter().any(|c| c.input_dim == root) {
                        return Err(Error::Invalid(alloc::format!("{reader} re-indexes a partially shared dim")));
                    }
                    addr.add(u, dg.stride as i64);
                }
            }
        }
        Ok(Some(Operand::Mem { buf: st.buf, addr }))
    };
    let operand = |q: NodeId, reader: NodeId| -> Result<Operand> {
        address(q, reader)?.ok_or(Error::Invalid(alloc::format!("{q} has no storage")))
    };

    let mut leaves = Vec::with_capacity(tree.leaves.len());
    for leaf in &tree.leaves {
        let n = dfg.node(leaf.node);
        let dst = if forward.contains(&n.id) {
            None
        } else if let Some(b) = output_buf.get(&n.id) {
            Some((*b, own_address(dfg, &row_major(dfg, n.dims()))))
        } else {
            storage.get(&n.id).map(|s| (s.buf, own_address(dfg, &s.layout)))
        };
        let op = if skip.contains(&n.id) || fused.contains_key(&n.id) {
            LeafOp::Skip
        } else {
            match &n.kind {
                NodeKind::Read { slot } => {
                    let b = input_buf[slot];
                    LeafOp::Copy {
                        src: Operand::Mem { buf: b, addr: own_address(dfg, &row_major(dfg, n.dims())) },
                        guards: Vec::new(),
                        fill: 0.0,
                    }
                }
                NodeKind::Write { .. } => LeafOp::Copy { src: operand(n.inputs[0], n.id)?, guards: Vec::new(), fill: 0.0 },
                NodeKind::View { constraints, fill } => {
                    let mut guards = Vec::new();
                    for c in constraints {
                        let (mut lo, mut hi) = (c.offset, c.offset);
                        let mut e = SymAddr { base: c.offset, terms: Vec::new() };
                        for &(w, k) in &c.terms {
                            let span = k * (dfg.size(w) as i64 - 1);
                            lo += span.min(0);
                            hi += span.max(0);
                            e.add_scaled(&root_sym(dfg, w), k);
                        }
                        let bound = dfg.size(c.input_dim) as i64;
                        if lo < 0 || hi >= bound {
                            guards.push((e, bound));
                        }
                    }
                    LeafOp::Copy { src: operand(n.inputs[0], n.id)?, guards, fill: *fill }
                }
                NodeKind::Arith(a) => {
                    let ndata = n.inputs.len() - usize::from(a.init);
                    let data_ids = &n.inputs[..ndata];
                    let cin = if a.init { Some(operand(*n.inputs.last().expect("init input"), n.id)?) } else { None };
                    let fma = match data_ids {
                        [q] if fused.get(q) == Some(&n.id) => {
                            let qn = dfg.node(*q);
                            Some((operand(qn.inputs[0], qn.id)?, operand(qn.inputs[1], qn.id)?))
                        }
                        _ => None,
                    };
                    let data = if fma.is_some() {
                        Vec::new()
                    } else {
                        data_ids.iter().map(|q| operand(*q, n.id)).collect::<Result<Vec<_>>>()?
                    };
                    LeafOp::Compute {
                        arith: *a,
                        data,
                        fma,
                        cin,
                        reduces: !dfg.reduction_dims(n).is_empty(),
                    }
                }
            }
        };
        let need = match &op {
            LeafOp::Skip => 0,
            LeafOp::Copy { .. } => 1,
            LeafOp::Compute { arith, data, fma, cin, .. } => {
                let inputs = if fma.is_some() { 2 } else { data.len() };
                inputs + usize::from(cin.is_some()) * 2 + usize::from(arith.beta != 1.0) + 2
            }
        };
        leaves.push(LeafPlan { node: n.id, op, dst, forward: forward.contains(&n.id), free_after: Vec::new(), need });
    }

    // last reader of each forwarded value within its body
    let mut last_reader: BTreeMap<NodeId, usize> = BTreeMap::new();
    for (i, l) in leaves.iter().enumerate() {
        for o in leaf_operands(&l.op) {
            if let Operand::Fwd(q) = o {
                last_reader.insert(*q, i);
            }
        }
    }
    for (q, i) in last_reader {
        leaves[i].free_after.push(q);
    }

    let mut empty = alloc::vec![true; tree.loops.len()];
    let mut parents_bodies: BTreeMap<Option<LoopId>, Vec<usize>> = BTreeMap::new();
    for (i, leaf) in tree.leaves.iter().enumerate() {
        parents_bodies.entry(leaf.path.last().copied()).or_default().push(i);
        if leaves[i].op != LeafOp::Skip {
            for l in &leaf.path {
                empty[l.index()] = false;
            }
        }
    }
    let reserve = parents_bodies
        .values()
        .map(|ls| {
            let fwd = ls.iter().filter(|i| leaves[**i].forward).count();
            fwd + ls.iter().map(|i| leaves[*i].need).max().unwrap_or(0)
        })
        .max()
        .unwrap_or(0)
        .max(1);
    if reserve + 1 > target.vregs {
        return Err(Error::BlockTooLarge { needed: reserve + 1, available: target.vregs });
    }

    let vector = vectorizable(tree, &leaves, target);
    let blocks = block_candidates(tree, &leaves, &vector, target, reserve);
    Ok(Plan { leaves, buffers, vector, empty, blocks })
}

/// Address of a node's own output at its own leaf.
fn own_address(dfg: &Dfg, layout: &[Digit]) -> SymAddr {
    let mut addr = SymAddr::default();
    for dg in layout {
        match dg.index {
            DigitIndex::Root(d) => addr.add_scaled(&root_sym(dfg, d), dg.stride as i64),
            DigitIndex::Leaf(u) => addr.add(u, dg.stride as i64),
        }
    }
    addr
}

pub(crate) fn leaf_operands(op: &LeafOp) -> Vec<&Operand> {
    match op {
        LeafOp::Skip => Vec::new(),
        LeafOp::Copy { src, .. } => alloc::vec![src],
        LeafOp::Compute { data, fma, cin, .. } => {
            let mut v: Vec<&Operand> = data.iter().collect();
            if let Some((a, b)) = fma {
                v.push(a);
                v.push(b);
            }
            v.extend(cin.iter());
            v
        }
    }
}

/// Innermost loops whose every access is contiguous or invariant along the loop variable.
fn vectorizable(tree: &LoopTree, leaves: &[LeafPlan], target: &TargetDescriptor) -> Vec<bool> {
    let dfg = &tree.dfg;
    tree.loops
        .iter()
        .map(|lp| {
            if target.lanes < 2 || lp.children.iter().any(|c| matches!(c, Item::Loop(_))) {
                return false;
            }
            let v = lp.var;
            lp.children.iter().all(|c| {
                let Item::Leaf(i) = c else { return false };
                let p = &leaves[*i];
                let mem_ok = |o: &Operand| match o {
                    Operand::Fwd(_) => true,
                    Operand::Mem { addr, .. } => matches!(addr.coeff(v), 0 | 1),
                };
                let dst_ok = p.dst.as_ref().is_none_or(|(_, a)| a.coeff(v) == 1);
                match &p.op {
                    LeafOp::Skip => true,
                    LeafOp::Copy { src, guards, .. } => guards.is_empty() && mem_ok(src) && dst_ok,
                    LeafOp::Compute { reduces, .. } => {
                        let n = dfg.node(p.node);
                        let red = *reduces && dfg.reduction_leaves(n).contains(&v);
                        !red && leaf_operands(&p.op).into_iter().all(mem_ok) && dst_ok
                    }
                }
            })
        })
        .collect()
}

/// Largest number of accumulator registers a vectorized loop over `v` can need.
fn vector_accs(dfg: &Dfg, v: VarId, lanes: usize) -> usize {
    trip_counts(dfg, v).into_iter().map(|c| c as usize / lanes + c as usize % lanes).max().unwrap_or(1)
}

fn block_candidates(
    tree: &LoopTree,
    leaves: &[LeafPlan],
    vector: &[bool],
    target: &TargetDescriptor,
    reserve: usize,
) -> BTreeMap<NodeId, BlockPlan> {
    let dfg = &tree.dfg;
    // leaves under each loop
    let mut under: Vec<Vec<usize>> = alloc::vec![Vec::new(); tree.loops.len()];
    for (i, leaf) in tree.leaves.iter().enumerate() {
        for l in &leaf.path {
            under[l.index()].push(i);
        }
    }
    let leaf_of: BTreeMap<NodeId, usize> = tree.leaves.iter().enumerate().map(|(i, l)| (l.node, i)).collect();
    let mut out = BTreeMap::new();
    for (i, leaf) in tree.leaves.iter().enumerate() {
        let LeafOp::Compute { reduces: true, .. } = &leaves[i].op else { continue };
        let n = dfg.node(leaf.node);
        let outputs: BTreeSet<VarId> = n.dims().iter().flat_map(|d| dfg.leaves(*d)).collect();
        let consumers: Vec<usize> = dfg.consumers(n.id).iter().map(|c| leaf_of[c]).collect();
        let cin = n.kind.arith().filter(|a| a.init).and_then(|_| n.inputs.last()).map(|c| leaf_of[c]);
        let h = leaf.path.len();
        let mut candidates = Vec::new();
        for b in 0..=h {
            if b < h {
                let sub = &under[leaf.path[b].index()];
                let other_reduction = sub.iter().any(|&j| {
                    j != i && matches!(leaves[j].op, LeafOp::Compute { reduces: true, .. })
                });
                let has_consumer = consumers.iter().any(|c| sub.contains(c));
                let has_cin = cin.is_some_and(|c| sub.contains(&c) && leaves[c].op != LeafOp::Skip);
                if other_reduction || has_consumer || has_cin {
                    continue;
                }
            }
            let accs: usize = leaf.path[b..]
                .iter()
                .filter(|l| outputs.contains(&tree.loop_(**l).var))
                .map(|l| {
                    let ext = tree.loop_(*l).extent;
                    if vector[l.index()] {
                        vector_accs(dfg, tree.loop_(*l).var, target.lanes)
                    } else {
                        ext
                    }
                })
                .fold(1usize, |a, e| a.saturating_mul(e));
            if accs + reserve <= target.vregs || b == h {
                candidates.push(b);
            }
        }
        out.insert(n.id, BlockPlan { leaf: i, path: leaf.path.clone(), outputs, candidates, choice: 0 });
    }
    out
}
