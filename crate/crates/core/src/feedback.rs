//! Reference evaluation and schedule-independent analytics.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::backend::{Buffers, Counters};
use crate::error::{Error, Result};
use crate::ir::{validate, Dfg, ElementwiseOp, Node, NodeKind, VarId};

/// Feedback shown after every schedule change.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleStats {
    pub flops: u64,
    /// Compulsory external traffic: every input and output element once, 4 bytes each.
    pub bytes_moved: u64,
    pub arithmetic_intensity: f64,
    pub compile_ms: f64,
    pub gflops: f64,
    pub repetitions: u64,
    pub vm_counters: Counters,
}

impl ScheduleStats {
    /// The schedule-independent part of the stats.
    pub fn for_dfg(dfg: &Dfg) -> Self {
        let flops = count_flops(dfg);
        let bytes_moved = bytes_moved(dfg);
        ScheduleStats { flops, bytes_moved, arithmetic_intensity: ratio(flops, bytes_moved), ..Default::default() }
    }
}

fn ratio(flops: u64, bytes: u64) -> f64 {
    if bytes == 0 {
        0.0
    } else {
        flops as f64 / bytes as f64
    }
}

/// Two operations per combine/fold pair at every iteration point of a
/// contraction (one per arithmetic node per point, or `inputs - 1` for a
/// many-input combine), plus one per element for each non-identity pre/post op.
/// A one-input, reduction-free node with a post op is a plain elementwise map
/// and counts only the post op.
pub fn count_flops(dfg: &Dfg) -> u64 {
    let mut total = 0u64;
    for n in dfg.nodes() {
        let NodeKind::Arith(a) = &n.kind else { continue };
        let points: u64 = dfg.iteration_dims(n).iter().map(|d| dfg.size(*d) as u64).product();
        let data = n.inputs.len() - usize::from(a.init);
        let elems = dfg.elements(n.dims()) as u64;
        let map = data == 1 && !a.init && points == elems && a.post != ElementwiseOp::Identity;
        if !map {
            total += points * data.saturating_sub(1).max(1) as u64;
        }
        if a.post != ElementwiseOp::Identity {
            total += elems;
        }
        if a.init && a.pre != ElementwiseOp::Identity {
            total += elems;
        }
    }
    total
}

/// Bytes of unique external elements read and written.
pub fn bytes_moved(dfg: &Dfg) -> u64 {
    let ins: usize = dfg.input_slots().values().map(|d| dfg.elements(d)).sum();
    let outs: usize = dfg.output_slots().values().map(|d| dfg.elements(d)).sum();
    4 * (ins + outs) as u64
}

pub fn arithmetic_intensity(dfg: &Dfg) -> f64 {
    ratio(count_flops(dfg), bytes_moved(dfg))
}

/// Row-major strides of `dims`, expressed per entry of `iter` (0 when absent).
fn strides_over(dfg: &Dfg, dims: &[VarId], iter: &[VarId]) -> Vec<i64> {
    let mut s = vec![0i64; iter.len()];
    let mut stride = 1i64;
    for d in dims.iter().rev() {
        if let Some(j) = iter.iter().position(|v| v == d) {
            s[j] = stride;
        }
        stride *= dfg.size(*d) as i64;
    }
    s
}

/// Visit every point of the box `sizes` in row-major order, passing the
/// offsets of each access pattern in `strides`.
fn for_each_point(sizes: &[usize], strides: &[Vec<i64>], mut f: impl FnMut(&[usize], &[i64])) {
    if sizes.contains(&0) {
        return;
    }
    let mut coord = vec![0usize; sizes.len()];
    let mut offs = vec![0i64; strides.len()];
    loop {
        f(&coord, &offs);
        let mut j = sizes.len();
        loop {
            if j == 0 {
                return;
            }
            j -= 1;
            coord[j] += 1;
            for (o, s) in offs.iter_mut().zip(strides) {
                *o += s[j];
            }
            if coord[j] < sizes[j] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(strides) {
                *o -= s[j] * sizes[j] as i64;
            }
            coord[j] = 0;
        }
    }
}

fn elementwise(op: ElementwiseOp, x: f64) -> f64 {
    match op {
        ElementwiseOp::Identity => x,
        ElementwiseOp::Relu => x.max(0.0),
        ElementwiseOp::Sigmoid => 1.0 / (1.0 + libm::exp(-x)),
    }
}

fn combine(op: crate::ir::ArithOp, a: f64, b: f64) -> f64 {
    use crate::ir::ArithOp::*;
    match op {
        Add => a + b,
        Mul => a * b,
        Max => a.max(b),
        Min => a.min(b),
    }
}

/// Naive dense evaluation, node by node in topological order, in f64.
pub fn reference_eval(dfg: &Dfg, inputs: &Buffers) -> Result<Buffers> {
    if let Some(v) = validate(dfg).first() {
        return Err(Error::Invalid(alloc::format!("{v}")));
    }
    let mut vals: BTreeMap<_, Vec<f64>> = BTreeMap::new();
    let mut out = Buffers::new();
    for id in dfg.topo_order()? {
        let n = dfg.node(id);
        let v = match &n.kind {
            NodeKind::Read { slot } => {
                let b = inputs.get(slot).ok_or(Error::MissingSlot(*slot))?;
                let expected = dfg.elements(n.dims());
                if b.len() != expected {
                    return Err(Error::ShapeMismatch { slot: *slot, expected, got: b.len() });
                }
                b.iter().map(|x| *x as f64).collect()
            }
            NodeKind::Write { slot } => {
                let v = permute(dfg, n, &vals[&n.inputs[0]]);
                out.insert(*slot, v.iter().map(|x| *x as f32).collect());
                v
            }
            NodeKind::View { constraints, fill } => view(dfg, n, constraints, *fill as f64, &vals[&n.inputs[0]]),
            NodeKind::Arith(a) => {
                let iter = dfg.iteration_dims(n);
                let sizes: Vec<usize> = iter.iter().map(|d| dfg.size(*d)).collect();
                let data = n.inputs.len() - usize::from(a.init);
                let mut strides: Vec<Vec<i64>> = vec![strides_over(dfg, n.dims(), &iter)];
                for i in &n.inputs[..data] {
                    strides.push(strides_over(dfg, dfg.node(*i).dims(), &iter));
                }
                let elems = dfg.elements(n.dims());
                let mut acc: Vec<f64> = if a.init {
                    let cin = dfg.node(*n.inputs.last().expect("init input"));
                    let src = permute_between(dfg, cin.dims(), n.dims(), &vals[&cin.id]);
                    src.into_iter().map(|x| a.alpha as f64 * elementwise(a.pre, x)).collect()
                } else {
                    vec![a.op.identity() as f64; elems]
                };
                let ins: Vec<&Vec<f64>> = n.inputs[..data].iter().map(|i| &vals[i]).collect();
                let beta = a.beta as f64;
                for_each_point(&sizes, &strides, |_, offs| {
                    let mut t = ins[0][offs[1] as usize];
                    for (k, inp) in ins.iter().enumerate().skip(1) {
                        t = combine(a.op, t, inp[offs[k + 1] as usize]);
                    }
                    let o = &mut acc[offs[0] as usize];
                    *o = combine(a.op, *o, beta * t);
                });
                acc.into_iter().map(|x| elementwise(a.post, x)).collect()
            }
        };
        vals.insert(id, v);
    }
    Ok(out)
}

fn permute(dfg: &Dfg, n: &Node, src: &[f64]) -> Vec<f64> {
    permute_between(dfg, dfg.node(n.inputs[0]).dims(), n.dims(), src)
}

fn permute_between(dfg: &Dfg, from: &[VarId], to: &[VarId], src: &[f64]) -> Vec<f64> {
    let sizes: Vec<usize> = to.iter().map(|d| dfg.size(*d)).collect();
    let strides = vec![strides_over(dfg, from, to)];
    let mut out = Vec::with_capacity(src.len());
    for_each_point(&sizes, &strides, |_, offs| out.push(src[offs[0] as usize]));
    out
}

fn view(dfg: &Dfg, n: &Node, constraints: &[crate::ir::IndexConstraint], fill: f64, src: &[f64]) -> Vec<f64> {
    let input = dfg.node(n.inputs[0]);
    let dims = n.dims();
    let sizes: Vec<usize> = dims.iter().map(|d| dfg.size(*d)).collect();
    let in_strides = strides_over(dfg, input.dims(), input.dims());
    let mut out = Vec::with_capacity(dfg.elements(dims));
    for_each_point(&sizes, &[], |coord, _| {
        let at = |v: VarId| dims.iter().position(|d| *d == v).map_or(0, |j| coord[j] as i64);
        let mut off = 0i64;
        let mut inside = true;
        for (k, d) in input.dims().iter().enumerate() {
            let x = match constraints.iter().find(|c| c.input_dim == *d) {
                Some(c) => c.offset + c.terms.iter().map(|(v, s)| s * at(*v)).sum::<i64>(),
                None => at(*d),
            };
            inside &= (0..dfg.size(*d) as i64).contains(&x);
            off += x * in_strides[k];
        }
        out.push(if inside { src[off as usize] } else { fill });
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{affine, Builder, ContractOptions};
    use crate::ir::ArithOp;

    fn mm(m: usize, n: usize, k: usize) -> Dfg {
        let mut g = Builder::new();
        let (vm, vn, vk) = (g.var("m", m).unwrap(), g.var("n", n).unwrap(), g.var("k", k).unwrap());
        let a = g.input(&[vm, vk]);
        let b = g.input(&[vk, vn]);
        let c = g.contract(&[vm, vn], &[a.at(&[vm, vk]), b.at(&[vk, vn])], (ArithOp::Add, ArithOp::Mul)).unwrap();
        g.output(c);
        g.finish()
    }

    fn ramp(n: usize, seed: f32) -> Vec<f32> {
        (0..n).map(|i| (i as f32 * 0.37 + seed).sin() * 2.0).collect()
    }

    #[test]
    fn mm_512_analytics() {
        let d = mm(512, 512, 512);
        assert_eq!(count_flops(&d), 268_435_456);
        assert_eq!(bytes_moved(&d), 4 * 3 * 512 * 512);
        assert!((arithmetic_intensity(&d) - 268_435_456.0 / 3_145_728.0).abs() < 1e-9);
    }

    #[test]
    fn relu_and_broadcast_add_analytics() {
        let mut g = Builder::new();
        let n = g.var("n", 1000).unwrap();
        let x = g.input(&[n]);
        let y = g.map(&x.at(&[n]), ElementwiseOp::Relu).unwrap();
        g.output(y);
        let d = g.finish();
        assert_eq!(count_flops(&d), 1000);
        assert_eq!(arithmetic_intensity(&d), 0.125);

        let mut g = Builder::new();
        let (m, n) = (g.var("m", 6).unwrap(), g.var("n", 5).unwrap());
        let a = g.input(&[m]);
        let b = g.input(&[m, n]);
        let c = g.contract(&[m, n], &[a.at(&[m]), b.at(&[m, n])], (ArithOp::Add, ArithOp::Add)).unwrap();
        g.output(c);
        let d = g.finish();
        assert_eq!(count_flops(&d), 2 * 30);
        assert_eq!(arithmetic_intensity(&d), 60.0 / (4.0 * (6.0 + 60.0)));
    }

    #[test]
    fn mm_matches_triple_loop() {
        let d = mm(8, 8, 8);
        let (a, b) = (ramp(64, 0.1), ramp(64, 0.7));
        let out = reference_eval(&d, &[(0, a.clone()), (1, b.clone())].into()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want: f32 = (0..8).map(|k| a[i * 8 + k] * b[k * 8 + j]).sum();
                assert!((out[&2][i * 8 + j] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn tropical_matmul() {
        let mut g = Builder::new();
        let (m, n, k) = (g.var("m", 4).unwrap(), g.var("n", 4).unwrap(), g.var("k", 4).unwrap());
        let a = g.input(&[m, k]);
        let b = g.input(&[k, n]);
        let c = g.contract(&[m, n], &[a.at(&[m, k]), b.at(&[k, n])], (ArithOp::Max, ArithOp::Add)).unwrap();
        g.output(c);
        let (x, y) = (ramp(16, 0.2), ramp(16, 1.3));
        let out = reference_eval(&g.finish(), &[(0, x.clone()), (1, y.clone())].into()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = (0..4).map(|q| x[i * 4 + q] + y[q * 4 + j]).fold(f32::NEG_INFINITY, f32::max);
                assert!((out[&2][i * 4 + j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_operand_gives_alpha_cin_plus_beta_a() {
        let mut g = Builder::new();
        let (m, n, k) = (g.var("m", 4).unwrap(), g.var("n", 4).unwrap(), g.var("k", 4).unwrap());
        let a = g.input(&[m, k]);
        let id = g.input(&[k, n]);
        let cin = g.input(&[m, n]);
        let opts = ContractOptions { alpha: 0.5, beta: 2.0, init: Some(cin.at(&[m, n])), ..Default::default() };
        let c = g
            .contract_with(&[m, n], &[a.at(&[m, k]), id.at(&[k, n])], (ArithOp::Add, ArithOp::Mul), opts)
            .unwrap();
        g.output(c);
        let eye: Vec<f32> = (0..16).map(|i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).collect();
        let (x, ci) = (ramp(16, 0.5), ramp(16, 2.0));
        let out = reference_eval(&g.finish(), &[(0, x.clone()), (1, eye), (2, ci.clone())].into()).unwrap();
        for i in 0..16 {
            assert!((out[&3][i] - (0.5 * ci[i] + 2.0 * x[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_and_concat() {
        let mut g = Builder::new();
        let (x, r, i) = (g.var("x", 3).unwrap(), g.var("r", 3).unwrap(), g.var("i", 5).unwrap());
        let inp = g.input(&[i]);
        let w = g.input(&[r]);
        let y = g
            .contract(&[x], &[inp.at_index(vec![affine(&[(x, 1), (r, 1)], 0)]), w.at(&[r])], (ArithOp::Add, ArithOp::Mul))
            .unwrap();
        g.output(y);
        let out = reference_eval(&g.finish(), &[(0, vec![1.0, 2.0, 3.0, 4.0, 5.0]), (1, vec![1.0, 0.0, -1.0])].into());
        assert_eq!(out.unwrap()[&2], vec![-2.0, -2.0, -2.0]);

        let mut g = Builder::new();
        let (a, b, o) = (g.var("a", 2).unwrap(), g.var("b", 3).unwrap(), g.var("o", 5).unwrap());
        let p = g.input(&[a]);
        let q = g.input(&[b]);
        let c = g.concat(&[(p, a), (q, b)], o).unwrap();
        g.output(c);
        let out = reference_eval(&g.finish(), &[(0, vec![1.0, 2.0]), (1, vec![3.0, 4.0, 5.0])].into()).unwrap();
        assert_eq!(out[&2], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let d = mm(2, 2, 2);
        let err = reference_eval(&d, &[(0, vec![0.0; 3]), (1, vec![0.0; 4])].into()).unwrap_err();
        assert_eq!(err, Error::ShapeMismatch { slot: 0, expected: 4, got: 3 });
    }
}
