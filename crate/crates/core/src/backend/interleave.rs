//! Dependence-preserving list scheduling of straight-line segments, so that
//! independent accumulator chains alternate instead of running back to back.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use super::program::{Inst, Region};

const MAX_SEGMENT: usize = 512;

/// Reorder `insts` inside each unrolled region. `cuts` are indices that must
/// stay segment boundaries (register block edges).
pub(crate) fn run(insts: &mut [Inst], regions: &[Region], cuts: &BTreeSet<usize>) {
    for r in regions {
        let mut start = r.start;
        for i in r.start..=r.end {
            let barrier = i == r.end
                || cuts.contains(&i)
                || matches!(insts[i], Inst::LoopBegin { .. } | Inst::LoopEnd)
                || i - start >= MAX_SEGMENT;
            if barrier {
                if i > start + 2 {
                    schedule(&mut insts[start..i]);
                }
                start = if i < r.end && matches!(insts[i], Inst::LoopBegin { .. } | Inst::LoopEnd) { i + 1 } else { i };
            }
        }
    }
}

fn depends(later: &Inst, earlier: &Inst) -> bool {
    let (ld, lu) = (later.def(), later.uses());
    let (ed, eu) = (earlier.def(), earlier.uses());
    if let Some(d) = ed {
        if lu.contains(&d) || ld == Some(d) {
            return true;
        }
    }
    if let Some(d) = ld {
        if eu.contains(&d) {
            return true;
        }
    }
    match (earlier.mem(), later.mem()) {
        (Some(a), Some(b)) if a.buf == b.buf => is_store(earlier) || is_store(later),
        _ => false,
    }
}

fn is_store(i: &Inst) -> bool {
    matches!(i, Inst::VStore { .. } | Inst::SStore { .. })
}

fn schedule(seg: &mut [Inst]) {
    let n = seg.len();
    let mut preds = vec![0usize; n];
    let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..n {
        for i in 0..j {
            if depends(&seg[j], &seg[i]) {
                preds[j] += 1;
                succs[i].push(j);
            }
        }
    }
    let mut height = vec![1usize; n];
    for i in (0..n).rev() {
        height[i] = 1 + succs[i].iter().map(|&s| height[s]).max().unwrap_or(0);
    }
    let mut ready: BTreeSet<(usize, usize)> = BTreeSet::new();
    for i in 0..n {
        if preds[i] == 0 {
            ready.insert((usize::MAX - height[i], i));
        }
    }
    let mut order = Vec::with_capacity(n);
    while let Some(&first) = ready.iter().next() {
        ready.remove(&first);
        let i = first.1;
        order.push(i);
        for &s in &succs[i] {
            preds[s] -= 1;
            if preds[s] == 0 {
                ready.insert((usize::MAX - height[s], s));
            }
        }
    }
    debug_assert_eq!(order.len(), n);
    let old: Vec<Inst> = seg.to_vec();
    for (k, i) in order.into_iter().enumerate() {
        seg[k] = old[i].clone();
    }
}
