//! Ready-made graphs for the common operators.

use alloc::vec;

use crate::frontend::{affine, Builder, ContractOptions};
use crate::ir::{ArithOp, Dfg, ElementwiseOp, IndexConstraint};

/// `C[m, n] = sum_k A[m, k] * B[k, n]`.
pub fn matmul(m: usize, n: usize, k: usize) -> Dfg {
    let mut g = Builder::new();
    let (vm, vn, vk) = (g.var("m", m).unwrap(), g.var("n", n).unwrap(), g.var("k", k).unwrap());
    let a = g.input(&[vm, vk]);
    let b = g.input(&[vk, vn]);
    let c = g.contract(&[vm, vn], &[a.at(&[vm, vk]), b.at(&[vk, vn])], (ArithOp::Add, ArithOp::Mul)).unwrap();
    g.output(c);
    g.finish()
}

/// Valid 1-D convolution `O[x] = sum_r I[x + r] * W[r]`.
pub fn conv1d(input: usize, filter: usize) -> Dfg {
    let mut g = Builder::new();
    let i = g.var("i", input).unwrap();
    let x = g.var("x", input - filter + 1).unwrap();
    let r = g.var("r", filter).unwrap();
    let inp = g.input(&[i]);
    let w = g.input(&[r]);
    let o = g
        .contract(&[x], &[inp.at_index(vec![affine(&[(x, 1), (r, 1)], 0)]), w.at(&[r])], (ArithOp::Add, ArithOp::Mul))
        .unwrap();
    g.output(o);
    g.finish()
}

/// "Same" 1-D convolution with zero padding: `O[x] = sum_r I[x + r - filter/2] * W[r]`.
pub fn conv1d_same(input: usize, filter: usize) -> Dfg {
    let mut g = Builder::new();
    let (i, x, r) = (g.var("i", input).unwrap(), g.var("x", input).unwrap(), g.var("r", filter).unwrap());
    let inp = g.input(&[i]);
    let w = g.input(&[r]);
    let c = IndexConstraint { input_dim: i, terms: vec![(x, 1), (r, 1)], offset: -((filter / 2) as i64) };
    let v = g.view(inp, vec![c], &[x, r], 0.0).unwrap();
    let o = g.contract(&[x], &[v.at(&[x, r]), w.at(&[r])], (ArithOp::Add, ArithOp::Mul)).unwrap();
    g.output(o);
    g.finish()
}

/// 2x2 stride-2 max pooling of an `h x w` image.
pub fn maxpool2x2(h: usize, w: usize) -> Dfg {
    let mut g = Builder::new();
    let (vh, vw) = (g.var("h", h).unwrap(), g.var("w", w).unwrap());
    let (y, x) = (g.var("y", h / 2).unwrap(), g.var("x", w / 2).unwrap());
    let (a, b) = (g.var("a", 2).unwrap(), g.var("b", 2).unwrap());
    let i = g.input(&[vh, vw]);
    let idx = vec![affine(&[(y, 2), (a, 1)], 0), affine(&[(x, 2), (b, 1)], 0)];
    let o = g.contract(&[y, x], &[i.at_index(idx)], (ArithOp::Max, ArithOp::Max)).unwrap();
    g.output(o);
    g.finish()
}

/// `O[r, c] = I[c, r]`.
pub fn transpose(rows: usize, cols: usize) -> Dfg {
    let mut g = Builder::new();
    let (r, c) = (g.var("r", rows).unwrap(), g.var("c", cols).unwrap());
    let i = g.input(&[c, r]);
    g.output_as(i, &[r, c]).unwrap();
    g.finish()
}

/// Concatenation of `[a, n]` and `[b, n]` into `[a + b, n]`.
pub fn concat(a: usize, b: usize, n: usize) -> Dfg {
    let mut g = Builder::new();
    let (va, vb, vn) = (g.var("a", a).unwrap(), g.var("b", b).unwrap(), g.var("n", n).unwrap());
    let o = g.var("o", a + b).unwrap();
    let p = g.input(&[va, vn]);
    let q = g.input(&[vb, vn]);
    let c = g.concat(&[(p, va), (q, vb)], o).unwrap();
    g.output(c);
    g.finish()
}

/// `O[m, n] = A[m] + B[m, n]`.
pub fn broadcast_add(m: usize, n: usize) -> Dfg {
    let mut g = Builder::new();
    let (vm, vn) = (g.var("m", m).unwrap(), g.var("n", n).unwrap());
    let a = g.input(&[vm]);
    let b = g.input(&[vm, vn]);
    let c = g.contract(&[vm, vn], &[a.at(&[vm]), b.at(&[vm, vn])], (ArithOp::Add, ArithOp::Add)).unwrap();
    g.output(c);
    g.finish()
}

/// Fully connected layers with a relu after each: `H[b, o] = relu(sum_i W[o, i] * X[b, i])`.
/// `widths` lists the input width followed by each layer's output width.
pub fn mlp(batch: usize, widths: &[usize]) -> Dfg {
    let mut g = Builder::new();
    let b = g.var("b", batch).unwrap();
    let mut dim = g.var("j0", widths[0]).unwrap();
    let mut x = g.input(&[b, dim]);
    for (l, &w) in widths[1..].iter().enumerate() {
        let out = g.var(&alloc::format!("j{}", l + 1), w).unwrap();
        let wt = g.input(&[out, dim]);
        let opts = ContractOptions { post: ElementwiseOp::Relu, ..Default::default() };
        x = g.contract_with(&[b, out], &[wt.at(&[out, dim]), x.at(&[b, dim])], (ArithOp::Add, ArithOp::Mul), opts).unwrap();
        dim = out;
    }
    g.output(x);
    g.finish()
}

/// Elementwise relu over `n` elements.
pub fn relu(n: usize) -> Dfg {
    let mut g = Builder::new();
    let v = g.var("n", n).unwrap();
    let x = g.input(&[v]);
    let y = g.map(&x.at(&[v]), ElementwiseOp::Relu).unwrap();
    g.output(y);
    g.finish()
}

/// Look up a model by a short name such as `mm512`, `conv1d`, `pool`, `mlp`.
pub fn by_name(name: &str) -> Option<Dfg> {
    if let Some(n) = name.strip_prefix("mm").and_then(|s| s.parse::<usize>().ok()) {
        return (n > 0).then(|| matmul(n, n, n));
    }
    Some(match name {
        "conv1d" => conv1d(32, 3),
        "conv1d_same" => conv1d_same(32, 5),
        "pool" => maxpool2x2(16, 16),
        "transpose" => transpose(13, 7),
        "concat" => concat(5, 7, 9),
        "broadcast_add" => broadcast_add(12, 20),
        "mlp" => mlp(4, &[16, 24, 20, 8]),
        "relu" => relu(1000),
        _ => return None,
    })
}

pub const NAMES: [&str; 10] = ["mm16", "mm64", "conv1d", "conv1d_same", "pool", "transpose", "concat", "broadcast_add", "mlp", "relu"];
