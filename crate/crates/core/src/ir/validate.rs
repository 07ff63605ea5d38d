use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use super::{Dfg, NodeId, NodeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Rule {
    OrderNotPermutation,
    StagedNotInOrder,
    ReadHasInputs,
    WriteArity,
    WriteHasConsumers,
    WriteDimsMismatch,
    UnknownInput,
    Cycle,
    DeadNode,
    ArithNoInputs,
    InitDimsMismatch,
    AlphaWithoutInit,
    ViewArity,
    ViewUnknownDim,
    ViewUnmappedDim,
    ViewDuplicateConstraint,
    DimsNotRoot,
    DuplicateDim,
    SlotConflict,
}

impl Rule {
    pub fn code(self) -> &'static str {
        match self {
            Rule::OrderNotPermutation => "order-not-permutation",
            Rule::StagedNotInOrder => "staged-not-in-order",
            Rule::ReadHasInputs => "read-has-inputs",
            Rule::WriteArity => "write-arity",
            Rule::WriteHasConsumers => "write-has-consumers",
            Rule::WriteDimsMismatch => "write-dims-mismatch",
            Rule::UnknownInput => "unknown-input",
            Rule::Cycle => "cycle",
            Rule::DeadNode => "dead-node",
            Rule::ArithNoInputs => "arith-no-inputs",
            Rule::InitDimsMismatch => "init-dims-mismatch",
            Rule::AlphaWithoutInit => "alpha-without-init",
            Rule::ViewArity => "view-arity",
            Rule::ViewUnknownDim => "view-unknown-dim",
            Rule::ViewUnmappedDim => "view-unmapped-dim",
            Rule::ViewDuplicateConstraint => "view-duplicate-constraint",
            Rule::DimsNotRoot => "dims-not-root",
            Rule::DuplicateDim => "duplicate-dim",
            Rule::SlotConflict => "slot-conflict",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub node: NodeId,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.rule.code(), self.node)
    }
}

fn is_permutation(a: &[super::VarId], b: &[super::VarId]) -> bool {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort();
    y.sort();
    let before = x.len();
    x.dedup();
    x.len() == before && x == y
}

/// Check every structural invariant; an empty result means the graph is valid.
pub fn validate(dfg: &Dfg) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut bad = |node: NodeId, rule: Rule| out.push(Violation { node, rule });

    let mut consumers: BTreeMap<NodeId, usize> = BTreeMap::new();
    for n in dfg.nodes() {
        for i in &n.inputs {
            *consumers.entry(*i).or_default() += 1;
        }
    }

    let mut read_slots: BTreeMap<usize, (NodeId, Vec<usize>)> = BTreeMap::new();
    let mut write_slots: BTreeMap<usize, NodeId> = BTreeMap::new();

    for n in dfg.nodes() {
        let mut inputs_known = true;
        for i in &n.inputs {
            if dfg.try_node(*i).is_err() {
                bad(n.id, Rule::UnknownInput);
                inputs_known = false;
            }
        }

        let mut seen = Vec::new();
        for &d in n.dims() {
            match dfg.try_var(d) {
                Ok(v) if v.is_root() => {}
                _ => bad(n.id, Rule::DimsNotRoot),
            }
            if seen.contains(&d) {
                bad(n.id, Rule::DuplicateDim);
            }
            seen.push(d);
        }

        let has_consumers = consumers.get(&n.id).copied().unwrap_or(0) > 0;
        match &n.kind {
            NodeKind::Read { slot } => {
                if !n.inputs.is_empty() {
                    bad(n.id, Rule::ReadHasInputs);
                }
                let shape: Vec<usize> = n.dims().iter().map(|d| dfg.try_var(*d).map_or(0, |v| v.size)).collect();
                match read_slots.get(slot) {
                    Some((_, s)) if *s != shape => bad(n.id, Rule::SlotConflict),
                    Some(_) => {}
                    None => {
                        read_slots.insert(*slot, (n.id, shape));
                    }
                }
            }
            NodeKind::Write { slot } => {
                if n.inputs.len() != 1 {
                    bad(n.id, Rule::WriteArity);
                } else if inputs_known && !is_permutation(n.dims(), dfg.node(n.inputs[0]).dims()) {
                    bad(n.id, Rule::WriteDimsMismatch);
                }
                if has_consumers {
                    bad(n.id, Rule::WriteHasConsumers);
                }
                if write_slots.insert(*slot, n.id).is_some() {
                    bad(n.id, Rule::SlotConflict);
                }
            }
            NodeKind::Arith(a) => {
                let data_inputs = n.inputs.len() - usize::from(a.init && !n.inputs.is_empty());
                if data_inputs == 0 {
                    bad(n.id, Rule::ArithNoInputs);
                }
                if a.init && inputs_known {
                    if let Some(last) = n.inputs.last() {
                        if !is_permutation(dfg.node(*last).dims(), n.dims()) {
                            bad(n.id, Rule::InitDimsMismatch);
                        }
                    }
                }
                if !a.init && a.alpha != 0.0 {
                    bad(n.id, Rule::AlphaWithoutInit);
                }
            }
            NodeKind::View { constraints, .. } => {
                if n.inputs.len() != 1 {
                    bad(n.id, Rule::ViewArity);
                } else if inputs_known {
                    let input = dfg.node(n.inputs[0]);
                    let mut constrained = Vec::new();
                    for c in constraints {
                        if !input.dims().contains(&c.input_dim) {
                            bad(n.id, Rule::ViewUnknownDim);
                        }
                        if constrained.contains(&c.input_dim) {
                            bad(n.id, Rule::ViewDuplicateConstraint);
                        }
                        constrained.push(c.input_dim);
                        if c.terms.iter().any(|(v, _)| !n.dims().contains(v)) {
                            bad(n.id, Rule::ViewUnknownDim);
                        }
                    }
                    for d in input.dims() {
                        if !constrained.contains(d) && !n.dims().contains(d) {
                            bad(n.id, Rule::ViewUnmappedDim);
                        }
                    }
                }
            }
        }

        if !n.kind.is_write() && !has_consumers {
            bad(n.id, Rule::DeadNode);
        }

        if inputs_known {
            let expected = dfg.loop_vars(n);
            if !is_permutation(&n.order, &expected) {
                bad(n.id, Rule::OrderNotPermutation);
            }
            if n.staged.iter().any(|s| !n.order.contains(s)) {
                bad(n.id, Rule::StagedNotInOrder);
            }
        }
    }

    for (slot, w) in &write_slots {
        if read_slots.contains_key(slot) {
            bad(*w, Rule::SlotConflict);
        }
    }

    if let Err(crate::Error::Cycle(id)) = dfg.topo_order() {
        bad(id, Rule::Cycle);
    }
    out.sort();
    out.dedup();
    out
}
