use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Reverse;

use super::{Node, NodeId, NodeKind, SplitOrigin, SplitPart, Var, VarId};
use crate::error::{Error, Result};

/// Annotated dataflow graph: a variable table plus nodes keyed by id.
#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dfg {
    vars: Vec<Var>,
    nodes: BTreeMap<NodeId, Node>,
}

impl Dfg {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: &str, size: usize) -> Result<VarId> {
        if size == 0 {
            return Err(Error::Size { name: name.into(), size });
        }
        let id = VarId(self.vars.len() as u32);
        self.vars.push(Var { id, name: name.into(), size, origin: None, children: None });
        Ok(id)
    }

    /// Raw insertion of a split product; used by the scheduler and deserializers.
    pub(crate) fn push_split_var(&mut self, name: String, size: usize, origin: SplitOrigin) -> VarId {
        let id = VarId(self.vars.len() as u32);
        self.vars.push(Var { id, name, size, origin: Some(origin), children: None });
        id
    }

    pub(crate) fn set_children(&mut self, parent: VarId, children: (VarId, VarId)) {
        self.vars[parent.index()].children = Some(children);
    }

    /// Rebuild a variable table verbatim (deserialization). Children links are derived.
    pub fn from_parts(vars: Vec<Var>, nodes: Vec<Node>) -> Result<Self> {
        let mut dfg = Dfg { vars: Vec::with_capacity(vars.len()), nodes: BTreeMap::new() };
        for (i, mut v) in vars.into_iter().enumerate() {
            if v.size == 0 {
                return Err(Error::Size { name: v.name, size: 0 });
            }
            v.id = VarId(i as u32);
            v.children = None;
            dfg.vars.push(v);
        }
        let mut outer: BTreeMap<VarId, (usize, VarId)> = BTreeMap::new();
        let mut inner: BTreeMap<VarId, (usize, VarId)> = BTreeMap::new();
        for v in &dfg.vars {
            if let Some(o) = &v.origin {
                if o.parent >= v.id || o.factor == 0 {
                    return Err(Error::Invalid(alloc::format!("bad split origin on `{}`", v.name)));
                }
                let slot = match o.part {
                    SplitPart::Outer => &mut outer,
                    SplitPart::Inner => &mut inner,
                };
                if slot.insert(o.parent, (o.factor, v.id)).is_some() {
                    return Err(Error::Invalid(alloc::format!("`{}` split twice", dfg.vars[o.parent.index()].name)));
                }
            }
        }
        for (parent, (f, o)) in &outer {
            let Some(&(g, i)) = inner.get(parent) else {
                return Err(Error::Invalid("split without inner part".into()));
            };
            let psize = dfg.vars[parent.index()].size;
            if f != &g || dfg.vars[o.index()].size != psize.div_ceil(*f) || dfg.vars[i.index()].size != *f {
                return Err(Error::Invalid(alloc::format!(
                    "inconsistent split of `{}`",
                    dfg.vars[parent.index()].name
                )));
            }
            dfg.vars[parent.index()].children = Some((*o, i));
        }
        if inner.len() != outer.len() {
            return Err(Error::Invalid("split without outer part".into()));
        }
        for n in nodes {
            dfg.insert_node(n);
        }
        Ok(dfg)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: VarId) -> &Var {
        &self.vars[id.index()]
    }

    pub fn try_var(&self, id: VarId) -> Result<&Var> {
        self.vars.get(id.index()).ok_or(Error::UnknownVar(id))
    }

    pub fn var_by_name(&self, name: &str) -> Result<VarId> {
        let mut found = self.vars.iter().filter(|v| v.name == name);
        match (found.next(), found.next()) {
            (Some(v), None) => Ok(v.id),
            (Some(_), Some(_)) => Err(Error::AmbiguousVarName(name.into())),
            _ => Err(Error::UnknownVarName(name.into())),
        }
    }

    pub fn size(&self, id: VarId) -> usize {
        self.vars[id.index()].size
    }

    pub fn name(&self, id: VarId) -> &str {
        &self.vars[id.index()].name
    }

    pub fn insert_node(&mut self, node: Node) {
        self.nodes.insert(node.id, node);
    }

    pub fn next_node_id(&self) -> NodeId {
        NodeId(self.nodes.keys().next_back().map_or(0, |n| n.0 + 1))
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[&id]
    }

    pub fn try_node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(&id).ok_or(Error::UnknownNode(id))
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Result<&mut Node> {
        self.nodes.get_mut(&id).ok_or(Error::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub(crate) fn nodes_mut(&mut self) -> impl Iterator<Item = &mut Node> {
        self.nodes.values_mut()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.inputs.contains(&id)).map(|n| n.id).collect()
    }

    pub fn root_of(&self, mut v: VarId) -> VarId {
        while let Some(o) = &self.vars[v.index()].origin {
            v = o.parent;
        }
        v
    }

    /// Current leaves of `v`'s split tree, outer parts before inner parts.
    pub fn leaves(&self, v: VarId) -> Vec<VarId> {
        let mut out = Vec::new();
        self.collect_leaves(v, &mut out);
        out
    }

    fn collect_leaves(&self, v: VarId, out: &mut Vec<VarId>) {
        match self.vars[v.index()].children {
            Some((o, i)) => {
                self.collect_leaves(o, out);
                self.collect_leaves(i, out);
            }
            None => out.push(v),
        }
    }

    /// Every variable `leaf` was split out of, innermost first, with the
    /// coefficient of `leaf` in that variable's index.
    pub fn ancestors(&self, leaf: VarId) -> Vec<(VarId, i64)> {
        let mut out = Vec::new();
        let mut c = 1i64;
        let mut v = leaf;
        while let Some(o) = &self.vars[v.index()].origin {
            if o.part == SplitPart::Outer {
                c *= o.factor as i64;
            }
            v = o.parent;
            out.push((v, c));
        }
        out
    }

    /// Coefficient of `leaf` in the index of its root variable.
    pub fn root_coeff(&self, leaf: VarId) -> i64 {
        let mut c = 1i64;
        let mut v = leaf;
        while let Some(o) = &self.vars[v.index()].origin {
            if o.part == SplitPart::Outer {
                c *= o.factor as i64;
            }
            v = o.parent;
        }
        c
    }

    /// Root iteration variables of a node: output dims first, then the
    /// remaining (reduction) dims in first-seen input order.
    pub fn iteration_dims(&self, node: &Node) -> Vec<VarId> {
        let mut out: Vec<VarId> = Vec::new();
        let push = |v: VarId, out: &mut Vec<VarId>| {
            if !out.contains(&v) {
                out.push(v);
            }
        };
        match &node.kind {
            NodeKind::Write { .. } => {
                if let Some(inp) = node.inputs.first().and_then(|i| self.nodes.get(i)) {
                    for &d in inp.dims() {
                        push(d, &mut out);
                    }
                } else {
                    for &d in node.dims() {
                        push(d, &mut out);
                    }
                }
            }
            NodeKind::Read { .. } | NodeKind::View { .. } => {
                for &d in node.dims() {
                    push(d, &mut out);
                }
            }
            NodeKind::Arith(_) => {
                for &d in node.dims() {
                    push(d, &mut out);
                }
                for i in &node.inputs {
                    if let Some(inp) = self.nodes.get(i) {
                        for &d in inp.dims() {
                            push(d, &mut out);
                        }
                    }
                }
            }
        }
        out
    }

    /// Root dimensions reduced by an arithmetic node (empty for other kinds).
    pub fn reduction_dims(&self, node: &Node) -> Vec<VarId> {
        if node.kind.arith().is_none() {
            return Vec::new();
        }
        self.iteration_dims(node).into_iter().filter(|d| !node.dims().contains(d)).collect()
    }

    /// The leaf variables a node's order must be a permutation of.
    pub fn loop_vars(&self, node: &Node) -> Vec<VarId> {
        self.iteration_dims(node).into_iter().flat_map(|d| self.leaves(d)).collect()
    }

    pub fn reduction_leaves(&self, node: &Node) -> BTreeSet<VarId> {
        self.reduction_dims(node).into_iter().flat_map(|d| self.leaves(d)).collect()
    }

    /// Default loop order: the node's loop variables in canonical order.
    pub fn default_order(&self, node: &Node) -> Vec<VarId> {
        self.loop_vars(node)
    }

    /// Deterministic topological order; ties go to the smallest node id.
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        let mut indegree: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut users: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for n in self.nodes.values() {
            let mut count = 0;
            for i in &n.inputs {
                if !self.nodes.contains_key(i) {
                    return Err(Error::UnknownNode(*i));
                }
                users.entry(*i).or_default().push(n.id);
                count += 1;
            }
            indegree.insert(n.id, count);
        }
        let mut ready: BinaryHeap<Reverse<NodeId>> =
            indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| Reverse(id)).collect();
        let mut out = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(id)) = ready.pop() {
            out.push(id);
            if let Some(us) = users.get(&id) {
                for u in us {
                    let d = indegree.get_mut(u).expect("user registered");
                    *d -= 1;
                    if *d == 0 {
                        ready.push(Reverse(*u));
                    }
                }
            }
        }
        if out.len() != self.nodes.len() {
            let stuck = indegree.iter().find(|(_, &d)| d > 0).map(|(&id, _)| id).expect("cycle member");
            return Err(Error::Cycle(stuck));
        }
        Ok(out)
    }

    /// External input slots and their dims (first read of each slot wins).
    pub fn input_slots(&self) -> BTreeMap<usize, Vec<VarId>> {
        let mut out = BTreeMap::new();
        for n in self.nodes.values() {
            if let NodeKind::Read { slot } = n.kind {
                out.entry(slot).or_insert_with(|| n.dims().to_vec());
            }
        }
        out
    }

    pub fn output_slots(&self) -> BTreeMap<usize, Vec<VarId>> {
        let mut out = BTreeMap::new();
        for n in self.nodes.values() {
            if let NodeKind::Write { slot } = n.kind {
                out.entry(slot).or_insert_with(|| n.dims().to_vec());
            }
        }
        out
    }

    pub fn elements(&self, dims: &[VarId]) -> usize {
        dims.iter().map(|d| self.size(*d)).product()
    }

    /// Pick a name for a new variable that no existing variable uses.
    pub(crate) fn fresh_name(&self, base: &str) -> String {
        if !self.vars.iter().any(|v| v.name == base) {
            return base.into();
        }
        (1..)
            .map(|i| alloc::format!("{base}{i}"))
            .find(|c| !self.vars.iter().any(|v| &v.name == c))
            .expect("unbounded")
    }
}
