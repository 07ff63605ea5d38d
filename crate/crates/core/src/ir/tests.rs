use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::frontend::Builder;
use crate::schedule;

fn mm_ir() -> Dfg {
    let mut g = Builder::new();
    let (m, n, k) = (g.var("m", 4).unwrap(), g.var("n", 4).unwrap(), g.var("k", 4).unwrap());
    let a = g.input(&[m, k]);
    let b = g.input(&[k, n]);
    let c = g.contract(&[m, n], &[a.at(&[m, k]), b.at(&[k, n])], (ArithOp::Add, ArithOp::Mul)).unwrap();
    g.output(c);
    g.finish()
}

#[test]
fn matmul_graph_validates() {
    let dfg = mm_ir();
    assert!(validate(&dfg).is_empty());
    assert!(validate(&Dfg::new()).is_empty());
}

#[test]
fn missing_var_in_order_is_reported() {
    let mut dfg = mm_ir();
    let k = dfg.var_by_name("k").unwrap();
    let add = dfg.node_mut(NodeId(3)).unwrap();
    add.order.retain(|v| *v != k);
    assert_eq!(validate(&dfg), vec![Violation { node: NodeId(3), rule: Rule::OrderNotPermutation }]);
    assert_eq!(alloc::format!("{}", validate(&dfg)[0]), "order-not-permutation(%3)");
}

#[test]
fn structural_rules() {
    let mut dfg = mm_ir();
    dfg.node_mut(NodeId(0)).unwrap().inputs.push(NodeId(1));
    let mut s = dfg.clone();
    let rules: Vec<_> = validate(&dfg).into_iter().map(|v| v.rule).collect();
    assert!(rules.contains(&Rule::ReadHasInputs));

    // a consumer of the write node
    s.node_mut(NodeId(0)).unwrap().inputs.clear();
    s.node_mut(NodeId(2)).unwrap().inputs[1] = NodeId(4);
    let rules: Vec<_> = validate(&s).into_iter().map(|v| v.rule).collect();
    assert!(rules.contains(&Rule::WriteHasConsumers));
    assert!(rules.contains(&Rule::Cycle));
    assert!(rules.contains(&Rule::DeadNode));
}

#[test]
fn mm_topological_order() {
    let dfg = mm_ir();
    let order: Vec<u32> = dfg.topo_order().unwrap().into_iter().map(|n| n.0).collect();
    assert_eq!(order, vec![0, 1, 2, 3, 4]);
}

#[test]
fn read_write_chain_order() {
    let mut g = Builder::new();
    let x = g.var("x", 3).unwrap();
    let a = g.input(&[x]);
    g.output(a);
    let dfg = g.finish();
    assert_eq!(dfg.topo_order().unwrap(), vec![NodeId(0), NodeId(1)]);
}

fn diamond(ids: [u32; 5]) -> Dfg {
    // read -> {f, g} -> h -> write with caller-chosen ids
    let mut g = Builder::new();
    let x = g.var("x", 3).unwrap();
    let a = g.input(&[x]);
    let f = g.map(&a.at(&[x]), ElementwiseOp::Relu).unwrap();
    let gg = g.map(&a.at(&[x]), ElementwiseOp::Sigmoid).unwrap();
    let h = g.contract(&[x], &[f.at(&[x]), gg.at(&[x])], (ArithOp::Add, ArithOp::Add)).unwrap();
    g.output(h);
    let built = g.finish();
    let remap = |n: NodeId| NodeId(ids[(n.0 as usize).min(4)]);
    let mut nodes = Vec::new();
    for n in built.nodes() {
        // the pass-through reduction node is folded away by remapping ids 3/4
        let mut n = n.clone();
        if n.id.0 > 4 {
            continue;
        }
        n.id = remap(n.id);
        n.inputs = n.inputs.iter().map(|i| remap(*i)).collect();
        nodes.push(n);
    }
    Dfg::from_parts(built.vars().to_vec(), nodes).unwrap()
}

#[test]
fn diamond_tie_break_by_id() {
    let dfg = diamond([0, 1, 2, 3, 4]);
    let order = dfg.topo_order().unwrap();
    // both f-before-g and g-before-f are valid; the smaller id goes first
    let pos = |id| order.iter().position(|n| *n == NodeId(id)).unwrap();
    assert!(pos(1) < pos(2));
    let swapped = diamond([0, 2, 1, 3, 4]);
    let order = swapped.topo_order().unwrap();
    let pos = |id| order.iter().position(|n| *n == NodeId(id)).unwrap();
    assert!(pos(1) < pos(2));
    assert_eq!(order[0], NodeId(0));
}

#[test]
fn topo_order_ignores_insertion_order() {
    let dfg = mm_ir();
    let mut nodes: Vec<Node> = dfg.nodes().cloned().collect();
    nodes.reverse();
    let rebuilt = Dfg::from_parts(dfg.vars().to_vec(), nodes).unwrap();
    assert_eq!(rebuilt.topo_order().unwrap(), dfg.topo_order().unwrap());
}

#[test]
fn split_extents_reconstruct() {
    for size in 1..40usize {
        for factor in 1..12usize {
            let mut g = Builder::new();
            let x = g.var("x", size).unwrap();
            let a = g.input(&[x]);
            g.output(a);
            let mut dfg = g.finish();
            let (o, i) = schedule::split(&mut dfg, x, factor).unwrap();
            let product = dfg.size(o) * dfg.size(i);
            assert!(product >= size && product < size + factor);
            assert_eq!(dfg.root_coeff(o), factor as i64);
            assert_eq!(dfg.root_coeff(i), 1);
            assert_eq!(dfg.leaves(x), vec![o, i]);
        }
    }
}
