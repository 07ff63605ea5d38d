//! Schedule mutations. Every operation either leaves the graph valid or
//! fails without touching it.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ir::{Dfg, NodeId, SplitOrigin, SplitPart, VarId};

/// Split `var` by `factor` in every node that iterates it.
pub fn split(dfg: &mut Dfg, var: VarId, factor: usize) -> Result<(VarId, VarId)> {
    if factor == 0 {
        return Err(Error::ZeroFactor);
    }
    let v = dfg.try_var(var)?.clone();
    if !v.is_leaf() || !dfg.nodes().any(|n| n.order.contains(&var)) {
        return Err(Error::UnknownVar(var));
    }
    let outer_name = dfg.fresh_name(&format!("{}_o", v.name));
    let outer = dfg.push_split_var(
        outer_name,
        v.size.div_ceil(factor),
        SplitOrigin { parent: var, factor, part: SplitPart::Outer },
    );
    let inner_name = dfg.fresh_name(&format!("{}_i", v.name));
    let inner = dfg.push_split_var(inner_name, factor, SplitOrigin { parent: var, factor, part: SplitPart::Inner });
    dfg.set_children(var, (outer, inner));
    for node in dfg.nodes_mut() {
        if let Some(pos) = node.order.iter().position(|x| *x == var) {
            node.order.splice(pos..=pos, [outer, inner]);
        }
        if let Ok(pos) = node.staged.binary_search(&var) {
            node.staged.remove(pos);
            node.staged.extend([outer, inner]);
            node.staged.sort();
        }
    }
    Ok((outer, inner))
}

/// Number of iterations of the last outer step when `size` is split by `factor`.
pub fn tail_of(size: usize, factor: usize) -> Option<usize> {
    match size % factor {
        0 => None,
        r => Some(r),
    }
}

pub fn reorder(dfg: &mut Dfg, node: NodeId, new_order: &[VarId]) -> Result<()> {
    let n = dfg.try_node(node)?;
    let mut a = n.order.clone();
    let mut b = new_order.to_vec();
    a.sort();
    b.sort();
    let len = b.len();
    b.dedup();
    if a != b || len != b.len() {
        return Err(Error::NotAPermutation(node));
    }
    dfg.node_mut(node)?.order = new_order.to_vec();
    Ok(())
}

pub fn stage(dfg: &mut Dfg, node: NodeId, var: VarId) -> Result<()> {
    let n = dfg.node_mut(node)?;
    if !n.order.contains(&var) {
        return Err(Error::UnknownVar(var));
    }
    if let Err(pos) = n.staged.binary_search(&var) {
        n.staged.insert(pos, var);
    }
    Ok(())
}

pub fn unstage(dfg: &mut Dfg, node: NodeId, var: VarId) -> Result<()> {
    let n = dfg.node_mut(node)?;
    match n.staged.binary_search(&var) {
        Ok(pos) => {
            n.staged.remove(pos);
            Ok(())
        }
        Err(_) => Err(Error::UnknownVar(var)),
    }
}

/// Apply `action` to every node, rolling the whole graph back on the first failure.
pub fn bulk<F>(dfg: &mut Dfg, nodes: &[NodeId], mut action: F) -> Result<()>
where
    F: FnMut(&mut Dfg, NodeId) -> Result<()>,
{
    let snapshot = dfg.clone();
    for &n in nodes {
        if let Err(e) = action(dfg, n) {
            *dfg = snapshot;
            return Err(e);
        }
    }
    Ok(())
}

/// A replayable schedule action. Variables are referenced by name.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "action", rename_all = "snake_case"))]
pub enum Action {
    Split { var: String, factor: usize },
    Reorder { nodes: Vec<NodeId>, order: Vec<String> },
    Stage { node: NodeId, var: String },
    Unstage { node: NodeId, var: String },
}

impl Action {
    pub fn apply(&self, dfg: &mut Dfg) -> Result<()> {
        match self {
            Action::Split { var, factor } => {
                let v = dfg.var_by_name(var)?;
                split(dfg, v, *factor).map(|_| ())
            }
            Action::Reorder { nodes, order } => {
                let order = order.iter().map(|n| dfg.var_by_name(n)).collect::<Result<Vec<_>>>()?;
                bulk(dfg, nodes, |d, n| reorder(d, n, &order))
            }
            Action::Stage { node, var } => {
                let v = dfg.var_by_name(var)?;
                stage(dfg, *node, v)
            }
            Action::Unstage { node, var } => {
                let v = dfg.var_by_name(var)?;
                unstage(dfg, *node, v)
            }
        }
    }
}

/// Apply a sequence of actions to a copy of `dfg`.
pub fn replay(dfg: &Dfg, actions: &[Action]) -> Result<Dfg> {
    let mut out = dfg.clone();
    for a in actions {
        a.apply(&mut out)?;
    }
    Ok(out)
}

/// Draw up to `steps` random actions that apply cleanly in sequence.
/// `pick(n)` must return a value in `0..n`.
pub fn random_actions(dfg: &Dfg, steps: usize, pick: &mut impl FnMut(usize) -> usize) -> Vec<Action> {
    let mut d = dfg.clone();
    let mut out = Vec::new();
    for _ in 0..steps * 4 {
        if out.len() == steps {
            break;
        }
        let nodes: Vec<NodeId> = d.node_ids().collect();
        let node = nodes[pick(nodes.len())];
        let order = d.node(node).order.clone();
        if order.is_empty() {
            continue;
        }
        let action = match pick(3) {
            0 => {
                let v = order[pick(order.len())];
                let size = d.size(v);
                if size < 2 {
                    continue;
                }
                Action::Split { var: d.name(v).into(), factor: 1 + pick(size.min(9)) }
            }
            1 => {
                let mut perm = order.clone();
                for i in (1..perm.len()).rev() {
                    perm.swap(i, pick(i + 1));
                }
                let mut key = order.clone();
                key.sort();
                let group: Vec<NodeId> = if pick(2) == 0 {
                    nodes
                        .iter()
                        .copied()
                        .filter(|n| {
                            let mut o = d.node(*n).order.clone();
                            o.sort();
                            o == key
                        })
                        .collect()
                } else {
                    alloc::vec![node]
                };
                Action::Reorder { nodes: group, order: perm.iter().map(|v| d.name(*v).into()).collect() }
            }
            _ => Action::Stage { node, var: d.name(order[pick(order.len())]).into() },
        };
        if action.apply(&mut d).is_ok() {
            out.push(action);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::Builder;
    use crate::ir::{validate, ArithOp};
    use alloc::vec;

    fn matmul(m: usize, n: usize, k: usize) -> (Dfg, [VarId; 3]) {
        let mut g = Builder::new();
        let (vm, vn, vk) = (g.var("m", m).unwrap(), g.var("n", n).unwrap(), g.var("k", k).unwrap());
        let a = g.input(&[vm, vk]);
        let b = g.input(&[vk, vn]);
        let c = g.contract(&[vm, vn], &[a.at(&[vm, vk]), b.at(&[vk, vn])], (ArithOp::Add, ArithOp::Mul)).unwrap();
        g.output(c);
        (g.finish(), [vm, vn, vk])
    }

    #[test]
    fn split_with_tail_covers_extent_exactly() {
        let (mut dfg, [m, ..]) = matmul(512, 8, 8);
        let (o, i) = split(&mut dfg, m, 5).unwrap();
        assert_eq!((dfg.size(o), dfg.size(i)), (103, 5));
        assert_eq!(tail_of(512, 5), Some(2));
        // enumerate outer/inner pairs and count the in-range points
        let covered = (0..103).flat_map(|a| (0..5).map(move |b| a * 5 + b)).filter(|x| *x < 512).count();
        assert_eq!(covered, 512);
        assert_eq!(dfg.name(o), "m_o");
        assert_eq!(dfg.name(i), "m_i");
        assert!(validate(&dfg).is_empty());
        assert_eq!(dfg.node(NodeId(2)).order, vec![o, i, dfg.var_by_name("k").unwrap(), dfg.var_by_name("n").unwrap()]);
    }

    #[test]
    fn full_and_unit_splits() {
        let (mut dfg, [_, n, k]) = matmul(4, 512, 64);
        let (o, i) = split(&mut dfg, n, 512).unwrap();
        assert_eq!((dfg.size(o), dfg.size(i)), (1, 512));
        let (o, i) = split(&mut dfg, k, 1).unwrap();
        assert_eq!((dfg.size(o), dfg.size(i)), (64, 1));
        assert!(validate(&dfg).is_empty());
    }

    #[test]
    fn split_errors() {
        let (mut dfg, [m, ..]) = matmul(4, 4, 4);
        assert_eq!(split(&mut dfg, m, 0), Err(Error::ZeroFactor));
        split(&mut dfg, m, 2).unwrap();
        assert_eq!(split(&mut dfg, m, 2), Err(Error::UnknownVar(m)));
        assert_eq!(split(&mut dfg, VarId(99), 2), Err(Error::UnknownVar(VarId(99))));
    }

    #[test]
    fn reorder_requires_permutation() {
        let (mut dfg, [m, n, k]) = matmul(4, 4, 4);
        let mul = NodeId(2);
        let before = dfg.clone();
        let same = dfg.node(mul).order.clone();
        reorder(&mut dfg, mul, &same).unwrap();
        assert_eq!(dfg, before);
        assert_eq!(reorder(&mut dfg, mul, &[m, n]), Err(Error::NotAPermutation(mul)));
        assert_eq!(reorder(&mut dfg, mul, &[m, m, n]), Err(Error::NotAPermutation(mul)));
        reorder(&mut dfg, mul, &[m, n, k]).unwrap();
        assert_eq!(dfg.node(mul).order, vec![m, n, k]);
        assert_eq!(dfg.node(NodeId(3)).order, before.node(NodeId(3)).order);
    }

    #[test]
    fn stage_is_idempotent() {
        let (mut dfg, [m, n, k]) = matmul(4, 4, 4);
        stage(&mut dfg, NodeId(0), k).unwrap();
        stage(&mut dfg, NodeId(0), k).unwrap();
        assert_eq!(dfg.node(NodeId(0)).staged, vec![k]);
        assert_eq!(stage(&mut dfg, NodeId(0), n), Err(Error::UnknownVar(n)));
        let (o, i) = split(&mut dfg, k, 2).unwrap();
        assert_eq!(dfg.node(NodeId(0)).staged, vec![o, i]);
        let _ = m;
        assert!(validate(&dfg).is_empty());
    }

    #[test]
    fn bulk_is_all_or_nothing() {
        let (mut dfg, [m, n, k]) = matmul(4, 4, 4);
        bulk(&mut dfg, &[NodeId(2), NodeId(3)], |d, id| reorder(d, id, &[m, n, k])).unwrap();
        assert_eq!(dfg.node(NodeId(2)).order, vec![m, n, k]);
        assert_eq!(dfg.node(NodeId(3)).order, vec![m, n, k]);
        bulk(&mut dfg, &[], |d, id| reorder(d, id, &[])).unwrap();
        let snapshot = dfg.clone();
        let err = bulk(&mut dfg, &[NodeId(2), NodeId(4)], |d, id| reorder(d, id, &[k, n, m]));
        assert_eq!(err, Err(Error::NotAPermutation(NodeId(4))));
        assert_eq!(dfg, snapshot);
    }

    #[test]
    fn actions_replay() {
        let (dfg, _) = matmul(8, 8, 8);
        let actions = [
            Action::Split { var: "m".into(), factor: 4 },
            Action::Reorder { nodes: vec![NodeId(2), NodeId(3)], order: ["n", "m_o", "k", "m_i"].map(String::from).to_vec() },
            Action::Stage { node: NodeId(0), var: "m_i".into() },
        ];
        let a = replay(&dfg, &actions).unwrap();
        let b = replay(&dfg, &actions).unwrap();
        assert_eq!(a, b);
        assert!(validate(&a).is_empty());
        assert_eq!(a.node(NodeId(0)).staged.len(), 1);
    }
}
