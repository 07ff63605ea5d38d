//! Scripted three-step schedule search.
//!
//! 1. Register blocks and reduction tiles: split the output dimensions of the
//!    main contraction into blocks whose accumulators fit the register file,
//!    optionally tile the reduction so the block's operands stay in L1.
//! 2. Permutations: try every order of the innermost five loops, keeping the
//!    outer ones fixed, then slide the window outward one loop at a time.
//! 3. Packing: nest each input read under the compute loops and stage it.
//!
//! Candidates are scored by the number of memory-access instructions the VM
//! executes, then by total instructions, then by measured speed.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backend::{compile, Buffers, TargetDescriptor};
use crate::error::{Error, Result};
use crate::feedback::{reference_eval, ScheduleStats};
use crate::ir::{Dfg, NodeId, NodeKind, VarId};
use crate::lower::lower;
use crate::schedule::{replay, Action};

/// Produces the stats a candidate is scored by.
pub trait Evaluator {
    fn evaluate(&mut self, dfg: &Dfg, target: &TargetDescriptor) -> Result<ScheduleStats>;
}

/// Scores by the counters implied by the compiled program, without running it.
#[derive(Clone, Copy, Debug, Default)]
pub struct StaticEvaluator {
    pub unroll_limit: Option<usize>,
}

impl Evaluator for StaticEvaluator {
    fn evaluate(&mut self, dfg: &Dfg, target: &TargetDescriptor) -> Result<ScheduleStats> {
        let k = compile(&lower(dfg)?, target, self.unroll_limit)?;
        Ok(ScheduleStats { vm_counters: k.program.static_counters(), ..ScheduleStats::for_dfg(dfg) })
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Candidate {
    pub step: u8,
    pub actions: Vec<Action>,
    /// `None` when the candidate failed to compile or to verify.
    pub stats: Option<ScheduleStats>,
    /// Whether the candidate was checked against the reference evaluator.
    pub verified: bool,
    pub error: Option<String>,
}

impl Candidate {
    /// Lower is better.
    pub fn score(&self) -> Option<(u64, u64, i64)> {
        self.stats
            .as_ref()
            .map(|s| (s.vm_counters.memory_accesses(), s.vm_counters.instructions, -(s.gflops * 1e6) as i64))
    }
}

#[derive(Clone, Debug)]
pub struct TuneResult {
    pub best: Vec<Action>,
    pub leaderboard: Vec<Candidate>,
}

/// The loops the search works on: the nodes of the heaviest reduction.
#[derive(Clone, Debug)]
struct Main {
    rows: Option<VarId>,
    cols: VarId,
    red: Option<VarId>,
}

fn main_node(dfg: &Dfg) -> Option<NodeId> {
    dfg.nodes()
        .filter(|n| matches!(n.kind, NodeKind::Arith(_)))
        .max_by_key(|n| {
            let pts: usize = dfg.iteration_dims(n).iter().map(|d| dfg.size(*d)).product();
            (pts, !dfg.reduction_dims(n).is_empty(), core::cmp::Reverse(n.id))
        })
        .map(|n| n.id)
}

/// Nodes iterating exactly the same loop variables as `id`.
fn group(dfg: &Dfg, id: NodeId) -> Vec<NodeId> {
    let key = |n: NodeId| {
        let mut o = dfg.node(n).order.clone();
        o.sort();
        o
    };
    let k = key(id);
    dfg.node_ids().filter(|n| key(*n) == k).collect()
}

fn names(dfg: &Dfg, vars: &[VarId]) -> Vec<String> {
    vars.iter().map(|v| String::from(dfg.name(*v))).collect()
}

struct XorShift(u64);

impl XorShift {
    fn next(&mut self) -> u64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        self.0
    }
}

pub struct Tuner<E> {
    base: Dfg,
    target: TargetDescriptor,
    budget: usize,
    eval: E,
    leaderboard: Vec<Candidate>,
    seen: BTreeSet<Vec<Action>>,
    best: Option<usize>,
    next_step: u8,
    rng: XorShift,
    /// Inputs and reference outputs for spot checks, computed on first use.
    oracle: Option<(Buffers, Buffers)>,
    /// Fraction of candidates checked against the reference evaluator.
    pub verify_fraction: f64,
}

impl<E: Evaluator> Tuner<E> {
    pub fn new(dfg: &Dfg, target: &TargetDescriptor, budget: usize, eval: E) -> Self {
        Tuner {
            base: dfg.clone(),
            target: target.clone(),
            budget,
            eval,
            leaderboard: Vec::new(),
            seen: BTreeSet::new(),
            best: None,
            next_step: 0,
            rng: XorShift(0x9e37_79b9_7f4a_7c15),
            oracle: None,
            verify_fraction: 0.05,
        }
    }

    pub fn leaderboard(&self) -> &[Candidate] {
        &self.leaderboard
    }

    pub fn best(&self) -> Option<&Candidate> {
        self.best.map(|i| &self.leaderboard[i])
    }

    pub fn best_actions(&self) -> Vec<Action> {
        self.best().map(|c| c.actions.clone()).unwrap_or_default()
    }

    pub fn done(&self) -> bool {
        self.next_step > 3 || self.leaderboard.len() >= self.budget
    }

    /// Run the next step (the default schedule counts as step 0). Returns the
    /// step number that ran, or `None` once the search is over.
    pub fn step(&mut self) -> Option<u8> {
        if self.done() {
            return None;
        }
        let s = self.next_step;
        match s {
            0 => {
                self.try_candidate(0, Vec::new());
            }
            1 => self.step_blocks(),
            2 => self.step_permute(),
            _ => self.step_pack(),
        }
        self.next_step += 1;
        Some(s)
    }

    pub fn run(mut self) -> TuneResult {
        while self.step().is_some() {}
        TuneResult { best: self.best_actions(), leaderboard: self.leaderboard }
    }

    fn budget_left(&self) -> bool {
        self.leaderboard.len() < self.budget
    }

    fn verify(&mut self, dfg: &Dfg) -> Result<()> {
        if self.oracle.is_none() {
            let mut seed = XorShift(0x2545_f491_4f6c_dd1d);
            let inputs: Buffers = self
                .base
                .input_slots()
                .iter()
                .map(|(s, d)| {
                    let n = self.base.elements(d);
                    (*s, (0..n).map(|_| (seed.next() % 2001) as f32 / 1000.0 - 1.0).collect())
                })
                .collect();
            let want = reference_eval(&self.base, &inputs)?;
            self.oracle = Some((inputs, want));
        }
        let (inputs, want) = self.oracle.as_ref().expect("oracle");
        let mut k = compile(&lower(dfg)?, &self.target, None)?;
        let mut got = inputs.clone();
        k.execute(&mut got)?;
        for (slot, w) in want {
            let ok = got[slot].iter().zip(w).all(|(a, b)| (a - b).abs() <= 1e-3 * (1.0 + b.abs()));
            if !ok {
                return Err(Error::Invalid(alloc::format!("candidate disagrees with the reference on slot {slot}")));
            }
        }
        Ok(())
    }

    /// Evaluate `actions` unless already seen; returns whether it became the best.
    fn try_candidate(&mut self, step: u8, actions: Vec<Action>) -> bool {
        if !self.budget_left() || !self.seen.insert(actions.clone()) {
            return false;
        }
        let verified = (self.rng.next() % 10_000) as f64 / 10_000.0 < self.verify_fraction;
        let res = replay(&self.base, &actions).and_then(|d| {
            if verified {
                self.verify(&d)?;
            }
            self.eval.evaluate(&d, &self.target)
        });
        let (stats, error) = match res {
            Ok(s) => (Some(s), None),
            Err(e) => (None, Some(alloc::format!("{e}"))),
        };
        self.leaderboard.push(Candidate { step, actions, stats, verified, error });
        let i = self.leaderboard.len() - 1;
        let better = match (self.leaderboard[i].score(), self.best.and_then(|b| self.leaderboard[b].score())) {
            (Some(s), Some(b)) => s < b,
            (Some(_), None) => true,
            _ => false,
        };
        if better {
            self.best = Some(i);
        }
        better
    }

    fn best_dfg(&self) -> Dfg {
        replay(&self.base, &self.best_actions()).unwrap_or_else(|_| self.base.clone())
    }

    fn main(&self, dfg: &Dfg) -> Option<Main> {
        let n = dfg.node(main_node(dfg)?);
        let dims = n.dims();
        let cols = *dims.last()?;
        let rows = if dims.len() >= 2 { Some(dims[dims.len() - 2]) } else { None };
        let red = dfg.reduction_dims(n).last().copied();
        Some(Main { rows, cols, red })
    }

    fn step_blocks(&mut self) {
        let Some(main) = self.main(&self.base) else { return };
        let lanes = self.target.lanes;
        let dfg = &self.base;
        let cols_size = dfg.size(main.cols);
        let mut col_blocks: Vec<usize> = (1..=6).map(|m| m * lanes).filter(|b| *b <= cols_size).collect();
        if col_blocks.is_empty() {
            col_blocks.push(cols_size);
        }
        let row_blocks: Vec<usize> = match main.rows {
            Some(r) => (1..=8).filter(|b| *b <= dfg.size(r)).collect(),
            None => vec![1],
        };
        let l1 = self.target.cache_sizes.first().copied().unwrap_or(32 << 10);
        let k_tiles: Vec<Option<usize>> = match main.red {
            Some(k) => core::iter::once(None)
                .chain([8usize, 16, 32, 64, 128, 256, 512].into_iter().filter(|t| *t < dfg.size(k)).map(Some))
                .collect(),
            None => vec![None],
        };
        let mut shapes = Vec::new();
        for &cb in &col_blocks {
            for &rb in &row_blocks {
                let vecs = cb.div_ceil(lanes);
                if rb * vecs + vecs + 2 > self.target.vregs {
                    continue;
                }
                for &kt in &k_tiles {
                    if let Some(t) = kt {
                        if 4 * t * (rb + cb) > l1 {
                            continue;
                        }
                    }
                    shapes.push((rb, cb, kt));
                }
            }
        }
        // largest blocks first
        shapes.sort_by_key(|&(rb, cb, kt)| (core::cmp::Reverse(rb * cb.div_ceil(lanes)), kt.is_none(), kt));
        for (rb, cb, kt) in shapes {
            if !self.budget_left() {
                break;
            }
            if let Some(actions) = block_actions(&self.base, &main, rb, cb, kt) {
                self.try_candidate(1, actions);
            }
        }
    }

    fn step_permute(&mut self) {
        let dfg = self.best_dfg();
        let Some(id) = main_node(&dfg) else { return };
        let nodes = group(&dfg, id);
        let mut order = names(&dfg, &dfg.node(id).order);
        let depth = order.len();
        let w = depth.min(5);
        if w < 2 {
            return;
        }
        let prefix = self.best_actions();
        let mut start = depth - w;
        loop {
            let window: Vec<String> = order[start..start + w].to_vec();
            let mut best_window = window.clone();
            for perm in permutations(&window) {
                if !self.budget_left() {
                    return;
                }
                let mut o = order.clone();
                o.splice(start..start + w, perm.iter().cloned());
                let mut actions = prefix.clone();
                actions.push(Action::Reorder { nodes: nodes.clone(), order: o });
                if self.try_candidate(2, actions) {
                    best_window = perm;
                }
            }
            order.splice(start..start + w, best_window);
            if start == 0 {
                break;
            }
            start -= 1;
        }
    }

    fn step_pack(&mut self) {
        let dfg = self.best_dfg();
        let Some(id) = main_node(&dfg) else { return };
        let compute = dfg.node(id).order.clone();
        let reads: Vec<NodeId> = dfg.nodes().filter(|n| n.kind.is_read()).map(|n| n.id).collect();
        for r in reads {
            let node = dfg.node(r);
            let own: BTreeSet<VarId> = node.order.iter().copied().collect();
            let nested: Vec<VarId> = compute.iter().copied().filter(|v| own.contains(v)).collect();
            if nested.len() != node.order.len() {
                continue;
            }
            for j in 1..nested.len() {
                if !self.budget_left() {
                    return;
                }
                let mut actions = self.best_actions();
                actions.push(Action::Reorder { nodes: vec![r], order: names(&dfg, &nested) });
                for v in &nested[j..] {
                    actions.push(Action::Stage { node: r, var: dfg.name(*v).into() });
                }
                self.try_candidate(3, actions);
            }
        }
    }
}

/// Actions splitting the main loops into an `rb x cb` register block with an
/// optional reduction tile `kt`, ordered outer tiles, reduction, block.
fn block_actions(base: &Dfg, main: &Main, rb: usize, cb: usize, kt: Option<usize>) -> Option<Vec<Action>> {
    let mut d = base.clone();
    let mut actions = Vec::new();
    let mut split = |d: &mut Dfg, v: VarId, f: usize| -> Result<(VarId, VarId)> {
        let a = Action::Split { var: d.name(v).into(), factor: f };
        a.apply(d)?;
        actions.push(a);
        let c = d.var(v).children.expect("split");
        Ok(c)
    };
    let mut outer = Vec::new();
    let mut inner = Vec::new();
    if let Some(r) = main.rows {
        if rb < d.size(r) {
            let (o, i) = split(&mut d, r, rb).ok()?;
            outer.push(o);
            inner.push(i);
        } else {
            inner.push(r);
        }
    }
    if cb < d.size(main.cols) {
        let (o, i) = split(&mut d, main.cols, cb).ok()?;
        outer.push(o);
        inner.push(i);
    } else {
        inner.push(main.cols);
    }
    let mut red = Vec::new();
    if let Some(k) = main.red {
        match kt {
            Some(t) => {
                let (o, i) = split(&mut d, k, t).ok()?;
                outer.push(o);
                red.push(i);
            }
            None => red.push(k),
        }
    }
    let id = main_node(&d)?;
    let nodes = group(&d, id);
    let placed: BTreeSet<VarId> = outer.iter().chain(&red).chain(&inner).copied().collect();
    // leftover leaves (extra reduction or batch dims) go outermost in their current order
    let mut order: Vec<VarId> = d.node(id).order.iter().copied().filter(|v| !placed.contains(v)).collect();
    order.extend(outer.iter().chain(&red).chain(&inner).copied());
    actions.push(Action::Reorder { nodes, order: names(&d, &order) });
    Some(actions)
}

/// All permutations in lexicographic order of positions.
fn permutations(items: &[String]) -> Vec<Vec<String>> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    let mut out = vec![items.to_vec()];
    while let Some(i) = (1..idx.len()).rev().find(|&i| idx[i - 1] < idx[i]) {
        let j = (i..idx.len()).rev().find(|&j| idx[j] > idx[i - 1]).expect("successor");
        idx.swap(i - 1, j);
        idx[i..].reverse();
        out.push(idx.iter().map(|&k| items[k].clone()).collect());
    }
    out
}

/// Run all steps with the static evaluator.
pub fn tune(dfg: &Dfg, target: &TargetDescriptor, budget: usize) -> TuneResult {
    Tuner::new(dfg, target, budget, StaticEvaluator::default()).run()
}

/// Counts of candidates per step, for reporting.
pub fn per_step(leaderboard: &[Candidate]) -> BTreeMap<u8, usize> {
    let mut m = BTreeMap::new();
    for c in leaderboard {
        *m.entry(c.step).or_default() += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;

    #[test]
    fn permutations_are_complete() {
        let items: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| String::from(*s)).collect();
        let p = permutations(&items);
        assert_eq!(p.len(), 24);
        assert_eq!(p.iter().collect::<BTreeSet<_>>().len(), 24);
    }

    #[test]
    fn budget_one_is_the_default_schedule() {
        let r = tune(&models::matmul(32, 32, 32), &TargetDescriptor::avx2(), 1);
        assert_eq!(r.leaderboard.len(), 1);
        assert!(r.best.is_empty());
    }

    #[test]
    fn matmul_improves_and_respects_budget() {
        let d = models::matmul(64, 64, 64);
        let r = tune(&d, &TargetDescriptor::avx512(), 120);
        assert!(r.leaderboard.len() <= 120);
        let naive = r.leaderboard[0].score().unwrap();
        let best = replay(&d, &r.best).unwrap();
        let s = StaticEvaluator::default().evaluate(&best, &TargetDescriptor::avx512()).unwrap();
        assert!(s.vm_counters.memory_accesses() * 2 <= naive.0, "{} vs {}", s.vm_counters.memory_accesses(), naive.0);
        let best_score = r.leaderboard.iter().filter_map(|c| c.score()).min().unwrap();
        assert_eq!(best_score.0, s.vm_counters.memory_accesses());
    }

    #[test]
    fn elementwise_window_fits_depth() {
        let d = models::relu(1000);
        let mut t = Tuner::new(&d, &TargetDescriptor::avx2(), 50, StaticEvaluator::default());
        while t.step().is_some() {}
        assert!(t.leaderboard().iter().all(|c| c.error.is_none()));
        assert!(per_step(t.leaderboard()).get(&2).copied().unwrap_or(0) <= 2);
    }
}
