//! Lowering of an annotated graph into an explicit loop tree.
//!
//! Nodes are visited in topological order. A node reuses the longest prefix
//! of the current loop stack that matches its order and has not been closed;
//! the remaining variables open fresh loops. After a node is emitted, loops
//! over its staged variables and its reduction variables are closed, so no
//! later node can share them.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::ir::{validate, Dfg, ElementwiseOp, NodeId, NodeKind, VarId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LoopId(pub u32);

impl LoopId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "type", content = "id", rename_all = "lowercase"))]
pub enum Item {
    Loop(LoopId),
    /// Index into [`LoopTree::leaves`].
    Leaf(usize),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Loop {
    pub var: VarId,
    pub extent: usize,
    /// Iterations of the last trip of the enclosing outer loop, for inner split parts.
    pub tail: Option<usize>,
    pub parent: Option<LoopId>,
    pub children: Vec<Item>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LeafKind {
    Compute,
    Copy,
}

/// What a layout digit is indexed by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "by", content = "var", rename_all = "lowercase"))]
pub enum DigitIndex {
    /// Full root index, `sum(root_coeff(l) * iter(l))` over the root's leaves.
    Root(VarId),
    /// A single leaf iterator.
    Leaf(VarId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Digit {
    pub index: DigitIndex,
    pub extent: usize,
    pub stride: usize,
}

/// Buffer holding a node's output between its leaf and its consumers.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Allocation {
    pub size: usize,
    /// Deepest loop shared with every consumer; `None` is the tree root.
    pub at: Option<LoopId>,
    /// Row-major digits, outermost first.
    pub layout: Vec<Digit>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Leaf {
    pub node: NodeId,
    pub kind: LeafKind,
    /// Enclosing loops, outermost first.
    pub path: Vec<LoopId>,
    /// `None` for nodes without consumers.
    pub alloc: Option<Allocation>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LoopTree {
    pub dfg: Dfg,
    pub loops: Vec<Loop>,
    pub leaves: Vec<Leaf>,
    pub roots: Vec<Item>,
}

pub fn lower(dfg: &Dfg) -> Result<LoopTree> {
    let violations = validate(dfg);
    if let Some(v) = violations.first() {
        return Err(Error::Invalid(alloc::format!("{v}")));
    }
    let mut tree = LoopTree { dfg: dfg.clone(), loops: Vec::new(), leaves: Vec::new(), roots: Vec::new() };
    let mut stack: Vec<LoopId> = Vec::new();
    let mut closed: BTreeSet<LoopId> = BTreeSet::new();

    for id in dfg.topo_order()? {
        let node = dfg.node(id);
        // a view reads its input at shifted positions along constrained dims,
        // so the loops producing those positions cannot be shared
        let blocked: BTreeSet<VarId> = match &node.kind {
            NodeKind::View { constraints, .. } => constraints.iter().flat_map(|c| dfg.leaves(c.input_dim)).collect(),
            _ => BTreeSet::new(),
        };
        let mut keep = 0;
        while keep < node.order.len()
            && keep < stack.len()
            && tree.loops[stack[keep].index()].var == node.order[keep]
            && !closed.contains(&stack[keep])
            && !blocked.contains(&node.order[keep])
        {
            keep += 1;
        }
        stack.truncate(keep);
        for &v in &node.order[keep..] {
            let lid = LoopId(tree.loops.len() as u32);
            tree.loops.push(Loop {
                var: v,
                extent: dfg.size(v),
                tail: tail_extent(dfg, v),
                parent: stack.last().copied(),
                children: Vec::new(),
            });
            tree.attach(stack.last().copied(), Item::Loop(lid));
            stack.push(lid);
        }
        let kind = if node.kind.arith().is_some() { LeafKind::Compute } else { LeafKind::Copy };
        let leaf = tree.leaves.len();
        tree.leaves.push(Leaf { node: id, kind, path: stack.clone(), alloc: None });
        tree.attach(stack.last().copied(), Item::Leaf(leaf));

        let reductions = dfg.reduction_leaves(node);
        for l in &stack {
            let v = tree.loops[l.index()].var;
            if node.is_staged(v) || reductions.contains(&v) {
                closed.insert(*l);
            }
        }
    }

    for i in 0..tree.leaves.len() {
        let node = tree.leaves[i].node;
        if dfg.consumers(node).is_empty() {
            continue;
        }
        tree.leaves[i].alloc = Some(tree.allocation(node)?);
    }
    Ok(tree)
}

fn tail_extent(dfg: &Dfg, v: VarId) -> Option<usize> {
    let o = dfg.var(v).origin.as_ref()?;
    if o.part != crate::ir::SplitPart::Inner {
        return None;
    }
    crate::schedule::tail_of(dfg.size(o.parent), o.factor)
}

/// Number of elements materialized for `node`'s output.
pub fn alloc_size(tree: &LoopTree, node: NodeId) -> Result<usize> {
    tree.allocation(node).map(|a| a.size)
}

impl LoopTree {
    fn attach(&mut self, parent: Option<LoopId>, item: Item) {
        match parent {
            Some(p) => self.loops[p.index()].children.push(item),
            None => self.roots.push(item),
        }
    }

    pub fn loop_(&self, id: LoopId) -> &Loop {
        &self.loops[id.index()]
    }

    pub fn leaf_of(&self, node: NodeId) -> Result<&Leaf> {
        self.leaves.iter().find(|l| l.node == node).ok_or(Error::UnknownNode(node))
    }

    /// Loops enclosing both `node`'s leaf and every consumer's leaf, outermost first.
    pub fn shared_loops(&self, node: NodeId) -> Result<Vec<LoopId>> {
        let leaf = self.leaf_of(node)?;
        let consumers = self.dfg.consumers(node);
        if consumers.is_empty() {
            return Err(Error::NoConsumer(node));
        }
        let mut shared = leaf.path.len();
        for c in consumers {
            let cp = &self.leaf_of(c)?.path;
            let common = leaf.path.iter().zip(cp).take_while(|(a, b)| a == b).count();
            shared = shared.min(common);
        }
        Ok(leaf.path[..shared].to_vec())
    }

    fn allocation(&self, node: NodeId) -> Result<Allocation> {
        let shared = self.shared_loops(node)?;
        let dfg = &self.dfg;
        let n = dfg.node(node);
        let shared_vars: BTreeSet<VarId> = shared.iter().map(|l| self.loop_(*l).var).collect();
        let position = |v: VarId| n.order.iter().position(|x| *x == v).unwrap_or(usize::MAX);

        // (position in order, digit index, extent)
        let mut digits: Vec<(usize, DigitIndex, usize)> = Vec::new();
        for &d in n.dims() {
            let leaves = dfg.leaves(d);
            let unshared: Vec<VarId> = leaves.iter().copied().filter(|l| !shared_vars.contains(l)).collect();
            if unshared.len() == leaves.len() {
                let pos = leaves.iter().map(|l| position(*l)).min().unwrap_or(usize::MAX);
                digits.push((pos, DigitIndex::Root(d), dfg.size(d)));
            } else {
                for u in unshared {
                    digits.push((position(u), DigitIndex::Leaf(u), dfg.size(u)));
                }
            }
        }
        digits.sort_by_key(|d| d.0);
        let size = digits.iter().map(|d| d.2).product();
        let mut stride = size;
        let layout = digits
            .into_iter()
            .map(|(_, index, extent)| {
                stride /= extent;
                Digit { index, extent, stride }
            })
            .collect();
        Ok(Allocation { size, at: shared.last().copied(), layout })
    }

    /// Depth-first walk: `f(item, depth)` for every loop and leaf.
    pub fn walk(&self, mut f: impl FnMut(Item, usize)) {
        fn go(t: &LoopTree, items: &[Item], depth: usize, f: &mut impl FnMut(Item, usize)) {
            for &it in items {
                f(it, depth);
                if let Item::Loop(l) = it {
                    go(t, &t.loops[l.index()].children, depth + 1, f);
                }
            }
        }
        go(self, &self.roots, 0, &mut f);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{self}");
        s
    }

    fn leaf_line(&self, leaf: &Leaf, out: &mut String) -> fmt::Result {
        let dfg = &self.dfg;
        let n = dfg.node(leaf.node);
        let names = |vs: &[VarId]| vs.iter().map(|v| dfg.name(*v)).collect::<Vec<_>>().join(", ");
        let inputs = n.inputs.iter().map(|i| alloc::format!("{i}")).collect::<Vec<_>>();
        write!(out, "{}[{}] <- ", n.id, names(n.dims()))?;
        match &n.kind {
            NodeKind::Read { slot } => write!(out, "read({slot})")?,
            NodeKind::Write { slot } => write!(out, "write({slot}, {})", inputs.join(", "))?,
            NodeKind::View { constraints, fill } => {
                write!(out, "view({})", inputs.join(", "))?;
                for c in constraints {
                    write!(out, " {}=", dfg.name(c.input_dim))?;
                    let mut first = true;
                    for (v, k) in &c.terms {
                        if !first {
                            out.push('+');
                        }
                        first = false;
                        if *k != 1 {
                            write!(out, "{k}*")?;
                        }
                        out.push_str(dfg.name(*v));
                    }
                    if c.offset != 0 || first {
                        if !first && c.offset > 0 {
                            out.push('+');
                        }
                        write!(out, "{}", c.offset)?;
                    }
                }
                if *fill != 0.0 {
                    write!(out, " fill={fill}")?;
                }
            }
            NodeKind::Arith(a) => {
                let reduces = !dfg.reduction_dims(n).is_empty();
                let plain = a.beta == 1.0 && !a.init && a.pre == ElementwiseOp::Identity;
                if n.inputs.len() == 1 && !reduces && plain && a.post != ElementwiseOp::Identity {
                    write!(out, "{}({})", a.post.name(), inputs[0])?;
                } else {
                    write!(out, "{}({})", a.op.name(), inputs.join(", "))?;
                    if a.init {
                        write!(out, " init alpha={}", a.alpha)?;
                        if a.pre != ElementwiseOp::Identity {
                            write!(out, " pre={}", a.pre.name())?;
                        }
                    }
                    if a.beta != 1.0 {
                        write!(out, " beta={}", a.beta)?;
                    }
                    if a.post != ElementwiseOp::Identity {
                        write!(out, " post={}", a.post.name())?;
                    }
                }
            }
        }
        if !n.staged.is_empty() {
            write!(out, " staged=[{}]", names(&n.staged))?;
        }
        if let Some(a) = &leaf.alloc {
            write!(out, "  # alloc {}", a.size)?;
        }
        Ok(())
    }
}

impl fmt::Display for LoopTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        let mut res = Ok(());
        self.walk(|it, depth| {
            for _ in 0..depth {
                out.push_str("  ");
            }
            match it {
                Item::Loop(l) => {
                    let l = self.loop_(l);
                    res = res.and(write!(out, "iter {}: {}", self.dfg.name(l.var), l.extent));
                    if let Some(t) = l.tail {
                        res = res.and(write!(out, " (tail {t})"));
                    }
                }
                Item::Leaf(i) => res = res.and(self.leaf_line(&self.leaves[i], &mut out)),
            }
            out.push('\n');
        });
        res?;
        f.write_str(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::Builder;
    use crate::ir::{Arith, ArithOp};
    use crate::schedule::{reorder, split, stage};
    use alloc::vec;

    /// read -> relu -> write over [x, y, z]; returns the relu node.
    fn chain() -> (Dfg, [VarId; 3], NodeId) {
        let mut g = Builder::new();
        let x = g.var("x", 2).unwrap();
        let y = g.var("y", 3).unwrap();
        let z = g.var("z", 4).unwrap();
        let a = g.input(&[x, y, z]);
        let b = g.arith(Arith::new(ArithOp::Add).with_post(ElementwiseOp::Relu), &[a], &[x, y, z]).unwrap();
        g.output(b);
        (g.finish(), [x, y, z], b.0)
    }

    #[test]
    fn fused_chain() {
        let (dfg, ..) = chain();
        let t = lower(&dfg).unwrap();
        assert_eq!(t.loops.len(), 3);
        assert_eq!(alloc_size(&t, NodeId(0)).unwrap(), 1);
        assert_eq!(alloc_size(&t, NodeId(1)).unwrap(), 1);
        assert_eq!(alloc_size(&t, NodeId(2)), Err(Error::NoConsumer(NodeId(2))));
    }

    #[test]
    fn reordered_consumer_shares_outer_loop() {
        let (mut dfg, [x, y, z], b) = chain();
        reorder(&mut dfg, b, &[x, z, y]).unwrap();
        reorder(&mut dfg, NodeId(2), &[x, z, y]).unwrap();
        let t = lower(&dfg).unwrap();
        assert_eq!(alloc_size(&t, NodeId(0)).unwrap(), 12);
        assert_eq!(t.loops.len(), 5);
        let a = t.leaf_of(NodeId(0)).unwrap().alloc.clone().unwrap();
        assert_eq!(a.at, Some(LoopId(0)));
        assert_eq!(a.layout.iter().map(|d| (d.extent, d.stride)).collect::<Vec<_>>(), vec![(3, 4), (4, 1)]);
    }

    #[test]
    fn staging_grows_allocation() {
        let (mut dfg, [_, _, z], _) = chain();
        stage(&mut dfg, NodeId(0), z).unwrap();
        let t = lower(&dfg).unwrap();
        assert_eq!(alloc_size(&t, NodeId(0)).unwrap(), 4);
        assert_eq!(t.loops.len(), 4);
    }

    #[test]
    fn split_tail_and_partial_digit() {
        let (mut dfg, [_, _, z], b) = chain();
        let (zo, zi) = split(&mut dfg, z, 3).unwrap();
        stage(&mut dfg, NodeId(0), zi).unwrap();
        let t = lower(&dfg).unwrap();
        let zi_loop = t.loops.iter().find(|l| l.var == zi).unwrap();
        assert_eq!((zi_loop.extent, zi_loop.tail), (3, Some(1)));
        assert!(t.loops.iter().any(|l| l.var == zo && l.tail.is_none()));
        assert_eq!(alloc_size(&t, NodeId(0)).unwrap(), 3);
        let _ = b;
    }

    #[test]
    fn every_node_is_one_leaf_and_paths_are_var_unique() {
        let (mut dfg, [x, y, z], b) = chain();
        reorder(&mut dfg, b, &[z, y, x]).unwrap();
        let t = lower(&dfg).unwrap();
        assert_eq!(t.leaves.len(), dfg.len());
        for l in &t.leaves {
            let mut vars: Vec<_> = l.path.iter().map(|p| t.loop_(*p).var).collect();
            vars.sort();
            let before = vars.len();
            vars.dedup();
            assert_eq!(vars.len(), before);
        }
    }
}
