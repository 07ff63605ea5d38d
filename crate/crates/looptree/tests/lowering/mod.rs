//! Graphs whose loop trees are checked against golden renderings.

use looptree_core::frontend::Builder;
use looptree_core::ir::{Arith, ArithOp, Dfg, ElementwiseOp, NodeId, VarId};
use looptree_core::lower::lower;
use looptree_core::schedule::{reorder, stage};

pub const SIZES: [usize; 3] = [2, 3, 4];

/// `%a = relu(in)`, `%b = relu(%a)` over `[x, y, z]`.
fn chain() -> (Dfg, [VarId; 3], NodeId, NodeId) {
    let mut g = Builder::new();
    let x = g.var("x", SIZES[0]).unwrap();
    let y = g.var("y", SIZES[1]).unwrap();
    let z = g.var("z", SIZES[2]).unwrap();
    let i = g.input(&[x, y, z]);
    let relu = Arith::new(ArithOp::Add).with_post(ElementwiseOp::Relu);
    let a = g.arith(relu, &[i], &[x, y, z]).unwrap();
    let b = g.arith(relu, &[a], &[x, y, z]).unwrap();
    g.output(b);
    (g.finish(), [x, y, z], a.0, b.0)
}

pub struct Case {
    pub name: &'static str,
    pub dfg: Dfg,
    /// Node whose allocation the case is about.
    pub node: NodeId,
    pub alloc: usize,
}

pub fn all() -> Vec<Case> {
    let [_, sy, sz] = SIZES;
    let (d1, _, a1, _) = chain();

    let (mut d2, [x, y, z], a2, b2) = chain();
    let w = d2.nodes().find(|n| n.kind.is_write()).unwrap().id;
    reorder(&mut d2, b2, &[x, z, y]).unwrap();
    reorder(&mut d2, w, &[x, z, y]).unwrap();

    let mut g = Builder::new();
    let (x, y, z) = (g.var("x", SIZES[0]).unwrap(), g.var("y", SIZES[1]).unwrap(), g.var("z", SIZES[2]).unwrap());
    let i = g.input(&[x, y, z]);
    let r = g.arith(Arith::new(ArithOp::Add), &[i], &[x, y]).unwrap();
    let a = g.arith(Arith::new(ArithOp::Add), &[i, r], &[x, y, z]).unwrap();
    g.output(a);
    let d3 = g.finish();

    let (mut d4, [_, _, z4], a4, _) = chain();
    stage(&mut d4, a4, z4).unwrap();

    vec![
        Case { name: "lower1", dfg: d1, node: a1, alloc: 1 },
        Case { name: "lower2", dfg: d2, node: a2, alloc: sy * sz },
        Case { name: "lower3", dfg: d3, node: r.0, alloc: 1 },
        Case { name: "lower4", dfg: d4, node: a4, alloc: sz },
    ]
}

pub fn render(l: &Case) -> String {
    lower(&l.dfg).unwrap().render()
}
