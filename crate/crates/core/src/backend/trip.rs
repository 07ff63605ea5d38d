//! Trip counts under partial tiles. Every split variable `p` bounds the
//! leaves below it: `sum(coeff * leaf) < size(p)`. The residual of `p` is
//! what is left of that bound once some of its leaves are fixed, clamped to
//! the span the still-free leaves can reach so that equal states compare equal.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::ir::{Dfg, VarId};

pub(crate) type Resid = BTreeMap<VarId, i64>;

pub(crate) struct Trip {
    pub count: i64,
    /// `(bounding var, coefficient of the loop var in it, residual, span of the other free leaves)`
    bounds: Vec<(VarId, i64, i64, i64)>,
}

impl Trip {
    pub fn new(dfg: &Dfg, v: VarId, resid: &Resid, unbound: impl Fn(VarId) -> bool) -> Self {
        let mut count = dfg.size(v) as i64;
        let mut bounds = Vec::new();
        for (p, c) in dfg.ancestors(v) {
            let r = resid.get(&p).copied().unwrap_or(dfg.size(p) as i64);
            count = count.min((r + c - 1) / c);
            let base = dfg.root_coeff(p);
            let span = 1 + dfg
                .leaves(p)
                .into_iter()
                .filter(|u| *u != v && unbound(*u))
                .map(|u| dfg.root_coeff(u) / base * (dfg.size(u) as i64 - 1))
                .sum::<i64>();
            bounds.push((p, c, r, span));
        }
        Trip { count: count.max(0), bounds }
    }

    /// Residuals after fixing the loop variable to `t`.
    pub fn after(&self, t: i64) -> Vec<(VarId, i64)> {
        self.bounds.iter().map(|&(p, c, r, span)| (p, (r - c * t).min(span))).collect()
    }
}

/// Trip counts a loop over `v` can take, assuming the leaves of its root are
/// bound outermost first.
pub(crate) fn trip_counts(dfg: &Dfg, v: VarId) -> BTreeSet<i64> {
    let root = dfg.root_of(v);
    let cv = dfg.root_coeff(v);
    let mut outer: Vec<VarId> = dfg.leaves(root).into_iter().filter(|u| dfg.root_coeff(*u) > cv).collect();
    outer.sort_by_key(|u| core::cmp::Reverse(dfg.root_coeff(*u)));
    let mut states: BTreeSet<Vec<(VarId, i64)>> = [Vec::new()].into();
    for (j, u) in outer.iter().enumerate() {
        let free = |w: VarId| !outer[..=j].contains(&w);
        let mut next = BTreeSet::new();
        for s in &states {
            let resid: Resid = s.iter().copied().collect();
            let trip = Trip::new(dfg, *u, &resid, free);
            for t in 0..trip.count {
                let mut r = resid.clone();
                r.extend(trip.after(t));
                next.insert(r.into_iter().collect());
            }
        }
        states = next;
    }
    states.into_iter().map(|s| Trip::new(dfg, v, &s.into_iter().collect(), |_| true).count).collect()
}
