//! Instruction emission. Walks the loop tree once; loops become runtime
//! loops or unrolled straight-line code, with partial trips emitted as
//! separate specialized runs instead of branches.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use super::plan::{LeafOp, Operand, Plan, SymAddr};
use super::program::{Affine, Guard, Inst, Mem, Reg, Region, RegisterBlock};
use super::target::TargetDescriptor;
use super::trip::{Resid, Trip};
use crate::error::Error;
use crate::ir::{ArithOp, Dfg, ElementwiseOp, NodeId, VarId};
use crate::lower::{Item, LoopId, LoopTree};

pub(crate) struct Emitted {
    pub insts: Vec<Inst>,
    pub blocks: Vec<RegisterBlock>,
    pub regions: Vec<Region>,
    pub slots: usize,
}

pub(crate) fn emit(tree: &LoopTree, plan: &mut Plan, target: &TargetDescriptor, limit: usize) -> crate::Result<Emitted> {
    loop {
        let mut e = Emitter::new(tree, plan, target, limit);
        match e.items(&tree.roots) {
            Ok(()) => {
                return Ok(Emitted { insts: e.insts, blocks: e.blocks, regions: e.regions, slots: e.max_depth });
            }
            Err(Fail::Overflow(node)) => {
                if !plan.deepen(node) {
                    return Err(Error::BlockTooLarge { needed: target.vregs + 1, available: target.vregs });
                }
            }
            Err(Fail::Abort) => return Err(Error::Invalid("unroll trial escaped".into())),
            Err(Fail::Fatal(err)) => return Err(err),
        }
    }
}

#[derive(Debug)]
enum Fail {
    /// An unroll trial exceeded its budget.
    Abort,
    /// A register block did not fit; retry with a smaller one.
    Overflow(NodeId),
    Fatal(Error),
}

type R<T = ()> = core::result::Result<T, Fail>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bind {
    Rt(u16),
    Const(i64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum CacheKey {
    Load { kind: u8, mem: Mem },
    Splat { bits: u32, vector: bool },
}

const VLOAD: u8 = 0;
const VBCAST: u8 = 1;
const SLOAD: u8 = 2;

#[derive(Clone)]
struct Regs {
    owned: Vec<u8>,
    cache: Vec<Option<(CacheKey, u64)>>,
    inuse: u64,
    stamp: u64,
}

impl Regs {
    fn new(n: usize) -> Self {
        Regs { owned: alloc::vec![0; n], cache: alloc::vec![None; n], inuse: 0, stamp: 0 }
    }

    fn busy(&self, r: usize) -> bool {
        self.owned[r] > 0 || self.inuse & (1 << r) != 0
    }

    fn alloc(&mut self) -> Option<Reg> {
        let n = self.owned.len();
        let r = (0..n).find(|&r| !self.busy(r) && self.cache[r].is_none()).or_else(|| {
            (0..n).filter(|&r| !self.busy(r)).min_by_key(|&r| self.cache[r].as_ref().map_or(0, |c| c.1))
        })?;
        self.cache[r] = None;
        self.inuse |= 1 << r;
        Some(r as Reg)
    }

    fn lookup(&mut self, key: &CacheKey) -> Option<Reg> {
        let r = self.cache.iter().position(|c| c.as_ref().is_some_and(|(k, _)| k == key))?;
        self.stamp += 1;
        self.cache[r].as_mut().expect("hit").1 = self.stamp;
        self.inuse |= 1 << r;
        Some(r as Reg)
    }

    fn insert(&mut self, r: Reg, key: CacheKey) {
        self.stamp += 1;
        self.cache[r as usize] = Some((key, self.stamp));
    }

    fn mark(&mut self, r: Reg) {
        self.inuse |= 1 << r;
    }

    fn flush(&mut self) {
        self.cache.iter_mut().for_each(|c| *c = None);
    }

    fn invalidate(&mut self, buf: u16) {
        for c in &mut self.cache {
            if matches!(c, Some((CacheKey::Load { mem, .. }, _)) if mem.buf == buf) {
                *c = None;
            }
        }
    }

    fn end_stmt(&mut self) {
        self.inuse = 0;
    }

    fn own(&mut self, r: Reg) {
        self.owned[r as usize] += 1;
        // owned values may be written in place (accumulators); keep them out of the cache
        self.cache[r as usize] = None;
    }

    fn release(&mut self, r: Reg) {
        self.owned[r as usize] -= 1;
    }
}

type Key = Vec<(VarId, i64, bool)>;

#[derive(Clone)]
struct Active {
    node: NodeId,
    forced: Vec<LoopId>,
    keys: BTreeMap<Key, Reg>,
}

#[derive(Clone)]
struct St {
    regs: Regs,
    fwd: BTreeMap<NodeId, Reg>,
    acc: Option<Active>,
    flags: BTreeMap<NodeId, (bool, bool)>,
    resid: Resid,
    binds: BTreeMap<VarId, Bind>,
    vec: Option<VarId>,
    depth: u16,
    trial: u32,
    unrolling: u32,
    cap: usize,
}

/// One stretch of consecutive iterations sharing a specialization.
#[derive(Clone, Debug)]
struct Seq {
    start: i64,
    count: i64,
    step: i64,
    vector: bool,
    /// Residuals of the loop variable's split ancestors after binding.
    resid: Vec<(VarId, i64)>,
    first: bool,
    last: bool,
}

struct Saved {
    resid: Vec<(VarId, Option<i64>)>,
    flags: Vec<(NodeId, Option<(bool, bool)>)>,
}

struct Snap {
    insts: usize,
    blocks: usize,
    regions: usize,
    st: St,
}

struct Emitter<'a> {
    tree: &'a LoopTree,
    dfg: &'a Dfg,
    plan: &'a Plan,
    lanes: usize,
    limit: usize,
    insts: Vec<Inst>,
    blocks: Vec<RegisterBlock>,
    regions: Vec<Region>,
    st: St,
    max_depth: usize,
    block_at: BTreeMap<LoopId, NodeId>,
    leaf_block: BTreeMap<usize, NodeId>,
    flagged: BTreeMap<LoopId, Vec<NodeId>>,
}

impl<'a> Emitter<'a> {
    fn new(tree: &'a LoopTree, plan: &'a Plan, target: &TargetDescriptor, limit: usize) -> Self {
        let mut block_at = BTreeMap::new();
        let mut leaf_block = BTreeMap::new();
        let mut flagged: BTreeMap<LoopId, Vec<NodeId>> = BTreeMap::new();
        for (&n, b) in &plan.blocks {
            if b.depth() < b.path.len() {
                block_at.insert(b.path[b.depth()], n);
            } else {
                leaf_block.insert(b.leaf, n);
            }
            for l in b.flag_loops(tree) {
                flagged.entry(l).or_default().push(n);
            }
        }
        Emitter {
            tree,
            dfg: &tree.dfg,
            plan,
            lanes: target.lanes,
            limit,
            insts: Vec::new(),
            blocks: Vec::new(),
            regions: Vec::new(),
            st: St {
                regs: Regs::new(target.vregs),
                fwd: BTreeMap::new(),
                acc: None,
                flags: BTreeMap::new(),
                resid: BTreeMap::new(),
                binds: BTreeMap::new(),
                vec: None,
                depth: 0,
                trial: 0,
                unrolling: 0,
                cap: usize::MAX,
            },
            max_depth: 0,
            block_at,
            leaf_block,
            flagged,
        }
    }

    fn push(&mut self, inst: Inst) -> R {
        if self.insts.len() >= self.st.cap || (self.st.trial > 0 && matches!(inst, Inst::LoopBegin { .. })) {
            return Err(Fail::Abort);
        }
        self.insts.push(inst);
        Ok(())
    }

    fn snapshot(&self) -> Snap {
        Snap { insts: self.insts.len(), blocks: self.blocks.len(), regions: self.regions.len(), st: self.st.clone() }
    }

    fn restore(&mut self, s: Snap) {
        self.insts.truncate(s.insts);
        self.blocks.truncate(s.blocks);
        self.regions.truncate(s.regions);
        self.st = s.st;
    }

    fn items(&mut self, items: &[Item]) -> R {
        for it in items {
            match *it {
                Item::Loop(l) => {
                    if !self.plan.empty[l.index()] {
                        match self.block_at.get(&l) {
                            Some(&n) => self.block(n, Some(l))?,
                            None => self.loop_body(l)?,
                        }
                    }
                }
                Item::Leaf(i) => self.leaf(i)?,
            }
        }
        Ok(())
    }

    fn is_forced(&self, l: LoopId) -> bool {
        self.st.acc.as_ref().is_some_and(|a| a.forced.contains(&l))
    }

    fn seqs(&self, l: LoopId) -> Vec<Seq> {
        let v = self.tree.loop_(l).var;
        let trip = Trip::new(self.dfg, v, &self.st.resid, |u| !self.st.binds.contains_key(&u));
        let count = trip.count;
        if self.plan.vector[l.index()] {
            let lanes = self.lanes as i64;
            let full = count / lanes;
            let mut out = Vec::new();
            let seq = |start, count, step, vector| Seq { start, count, step, vector, resid: Vec::new(), first: false, last: false };
            if full > 0 {
                out.push(seq(0, full, lanes, true));
            }
            if count % lanes > 0 {
                out.push(seq(full * lanes, count % lanes, 1, false));
            }
            return out;
        }
        let flagged = self.flagged.contains_key(&l);
        let mut out: Vec<Seq> = Vec::new();
        for t in 0..count {
            let r = trip.after(t);
            let (first, last) = (flagged && t == 0, flagged && t == count - 1);
            match out.last_mut() {
                Some(s) if s.resid == r && (s.first, s.last) == (first, last) => s.count += 1,
                _ => out.push(Seq { start: t, count: 1, step: 1, vector: false, resid: r, first, last }),
            }
        }
        out
    }

    /// Bind state for one sequence; returns what to restore.
    fn enter(&mut self, l: LoopId, s: &Seq) -> Saved {
        let v = self.tree.loop_(l).var;
        let resid = s.resid.iter().map(|&(p, r)| (p, self.st.resid.insert(p, r))).collect();
        let mut flags = Vec::new();
        if let Some(ns) = self.flagged.get(&l) {
            for &n in ns {
                let prev = self.st.flags.get(&n).copied();
                let (f, la) = prev.unwrap_or((true, true));
                self.st.flags.insert(n, (f && s.first, la && s.last));
                flags.push((n, prev));
            }
        }
        if s.vector {
            self.st.vec = Some(v);
        }
        Saved { resid, flags }
    }

    fn leave(&mut self, l: LoopId, saved: Saved) {
        let v = self.tree.loop_(l).var;
        for (p, old) in saved.resid.into_iter().rev() {
            match old {
                Some(r) => self.st.resid.insert(p, r),
                None => self.st.resid.remove(&p),
            };
        }
        for (n, prev) in saved.flags {
            match prev {
                Some(p) => self.st.flags.insert(n, p),
                None => self.st.flags.remove(&n),
            };
        }
        self.st.binds.remove(&v);
        if self.st.vec == Some(v) {
            self.st.vec = None;
        }
    }

    fn loop_body(&mut self, l: LoopId) -> R {
        let seqs = self.seqs(l);
        if self.is_forced(l) {
            return self.unrolled(l, &seqs, true);
        }
        // each sequence independently: a vector body may unroll while its scalar remainder stays a loop
        for s in seqs {
            let one = core::slice::from_ref(&s);
            if !self.try_unroll(l, one)? {
                self.runtime(l, &s)?;
            }
        }
        Ok(())
    }

    fn unrolled(&mut self, l: LoopId, seqs: &[Seq], forced: bool) -> R {
        let mark = self.insts.len();
        let outer = self.st.unrolling == 0;
        let saved_cap = self.st.cap;
        let guard_forced = forced && outer && self.st.trial == 0;
        if guard_forced {
            self.st.cap = saved_cap.min(mark + self.limit);
        }
        self.st.unrolling += 1;
        let v = self.tree.loop_(l).var;
        let children = &self.tree.loop_(l).children;
        let mut res = Ok(());
        'outer: for s in seqs {
            let saved = self.enter(l, s);
            for j in 0..s.count {
                self.st.binds.insert(v, Bind::Const(s.start + j * s.step));
                if let Err(e) = self.items(children) {
                    res = Err(e);
                    self.leave(l, saved);
                    break 'outer;
                }
            }
            self.leave(l, saved);
        }
        self.st.unrolling -= 1;
        self.st.cap = saved_cap;
        match res {
            Err(Fail::Abort) if guard_forced => {
                let node = self.st.acc.as_ref().map(|a| a.node).expect("forced loops belong to a block");
                return Err(Fail::Overflow(node));
            }
            Err(e) => return Err(e),
            Ok(()) => {}
        }
        if outer && self.insts.len() > mark {
            self.regions.push(Region { start: mark, end: self.insts.len() });
        }
        Ok(())
    }

    fn try_unroll(&mut self, l: LoopId, seqs: &[Seq]) -> R<bool> {
        let total: i64 = seqs.iter().map(|s| s.count).sum();
        if total as usize > self.limit {
            return Ok(false);
        }
        let snap = self.snapshot();
        self.st.trial += 1;
        self.st.cap = self.st.cap.min(self.insts.len() + self.limit);
        match self.unrolled(l, seqs, false) {
            Ok(()) => {
                self.st.trial -= 1;
                self.st.cap = snap.st.cap;
                Ok(true)
            }
            Err(Fail::Abort) => {
                self.restore(snap);
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }

    fn runtime(&mut self, l: LoopId, s: &Seq) -> R {
        let v = self.tree.loop_(l).var;
        let mark = self.insts.len();
        let slot = self.st.depth;
        self.push(Inst::LoopBegin { slot, start: s.start, count: s.count as u32, step: s.step, var: v })?;
        self.st.regs.flush();
        let saved = self.enter(l, s);
        self.st.binds.insert(v, Bind::Rt(slot));
        self.st.depth += 1;
        self.max_depth = self.max_depth.max(self.st.depth as usize);
        let children = &self.tree.loop_(l).children;
        let r = self.items(children);
        self.st.depth -= 1;
        self.leave(l, saved);
        r?;
        self.st.regs.flush();
        if self.insts.len() == mark + 1 {
            self.insts.pop();
            Ok(())
        } else {
            self.push(Inst::LoopEnd)
        }
    }

    fn leaf(&mut self, i: usize) -> R {
        let lp = &self.plan.leaves[i];
        match &lp.op {
            LeafOp::Skip => {}
            LeafOp::Copy { .. } => self.copy_stmt(i)?,
            LeafOp::Compute { reduces: true, .. } => match self.leaf_block.get(&i) {
                Some(&n) => self.block(n, None)?,
                None => self.accumulate(i)?,
            },
            LeafOp::Compute { .. } => self.compute_stmt(i)?,
        }
        for q in &lp.free_after {
            if let Some(r) = self.st.fwd.remove(q) {
                self.st.regs.release(r);
            }
        }
        Ok(())
    }

    fn affine(&self, a: &SymAddr) -> R<Affine> {
        let mut out = Affine::constant(a.base);
        for &(v, c) in &a.terms {
            match self.st.binds.get(&v) {
                Some(Bind::Rt(s)) => out.add_term(*s, c),
                Some(Bind::Const(t)) => out.base += c * t,
                None => {
                    return Err(Fail::Fatal(Error::Invalid(alloc::format!(
                        "unbound variable `{}` in an address",
                        self.dfg.name(v)
                    ))))
                }
            }
        }
        Ok(out)
    }

    fn out_of_regs(&self) -> Fail {
        match &self.st.acc {
            Some(a) => Fail::Overflow(a.node),
            None => Fail::Fatal(Error::BlockTooLarge { needed: self.st.regs.owned.len() + 1, available: self.st.regs.owned.len() }),
        }
    }

    fn alloc(&mut self) -> R<Reg> {
        self.st.regs.alloc().ok_or_else(|| self.out_of_regs())
    }

    fn vector(&self) -> bool {
        self.st.vec.is_some()
    }

    fn load_kind(&self, addr: &SymAddr) -> u8 {
        match self.st.vec {
            Some(v) if addr.coeff(v) == 0 => VBCAST,
            Some(_) => VLOAD,
            None => SLOAD,
        }
    }

    fn load_inst(kind: u8, dst: Reg, mem: Mem) -> Inst {
        match kind {
            VLOAD => Inst::VLoad { dst, mem },
            VBCAST => Inst::VBroadcast { dst, mem },
            _ => Inst::SLoad { dst, mem },
        }
    }

    fn value(&mut self, o: &Operand) -> R<Reg> {
        match o {
            Operand::Fwd(q) => {
                let r = *self.st.fwd.get(q).ok_or_else(|| {
                    Fail::Fatal(Error::Invalid(alloc::format!("forwarded value {q} not live")))
                })?;
                self.st.regs.mark(r);
                Ok(r)
            }
            Operand::Mem { buf, addr } => {
                let kind = self.load_kind(addr);
                let mem = Mem { buf: *buf, addr: self.affine(addr)? };
                let key = CacheKey::Load { kind, mem };
                if let Some(r) = self.st.regs.lookup(&key) {
                    return Ok(r);
                }
                let r = self.alloc()?;
                let CacheKey::Load { mem, .. } = &key else { unreachable!() };
                self.push(Self::load_inst(kind, r, mem.clone()))?;
                self.st.regs.insert(r, key);
                Ok(r)
            }
        }
    }

    fn splat(&mut self, value: f32) -> R<Reg> {
        let key = CacheKey::Splat { bits: value.to_bits(), vector: self.vector() };
        if let Some(r) = self.st.regs.lookup(&key) {
            return Ok(r);
        }
        let r = self.alloc()?;
        self.push(if self.vector() { Inst::VSplat { dst: r, value } } else { Inst::SConst { dst: r, value } })?;
        self.st.regs.insert(r, key);
        Ok(r)
    }

    fn op(&mut self, op: ArithOp, a: Reg, b: Reg) -> R<Reg> {
        let dst = self.alloc()?;
        self.push(if self.vector() { Inst::VOp { op, dst, a, b } } else { Inst::SOp { op, dst, a, b } })?;
        Ok(dst)
    }

    fn apply(&mut self, f: ElementwiseOp, src: Reg) -> R<Reg> {
        let dst = self.alloc()?;
        self.push(Inst::ApplyPost { op: f, dst, src, vector: self.vector() })?;
        Ok(dst)
    }

    fn store(&mut self, src: Reg, buf: u16, addr: &SymAddr) -> R {
        let mem = Mem { buf, addr: self.affine(addr)? };
        self.push(if self.vector() { Inst::VStore { src, mem } } else { Inst::SStore { src, mem } })?;
        self.st.regs.invalidate(buf);
        Ok(())
    }

    fn put(&mut self, i: usize, r: Reg) -> R {
        let lp = &self.plan.leaves[i];
        if lp.forward {
            self.st.regs.own(r);
            self.st.fwd.insert(lp.node, r);
        } else if let Some((buf, addr)) = &lp.dst {
            self.store(r, *buf, addr)?;
        }
        self.st.regs.end_stmt();
        Ok(())
    }

    fn copy_stmt(&mut self, i: usize) -> R {
        let LeafOp::Copy { src, guards, fill } = &self.plan.leaves[i].op else { unreachable!() };
        let r = if guards.is_empty() {
            self.value(src)?
        } else {
            let Operand::Mem { buf, addr } = src else {
                return Err(Fail::Fatal(Error::Invalid("guarded view over a register value".into())));
            };
            let mut gs = Vec::with_capacity(guards.len());
            for (e, bound) in guards {
                gs.push(Guard { expr: self.affine(e)?, bound: *bound });
            }
            let mem = Mem { buf: *buf, addr: self.affine(addr)? };
            let dst = self.alloc()?;
            self.push(Inst::SLoadGuard { dst, mem, guards: gs, fill: *fill })?;
            dst
        };
        self.put(i, r)
    }

    fn term(&mut self, data: &[Operand], op: ArithOp) -> R<Reg> {
        let mut r = self.value(&data[0])?;
        for d in &data[1..] {
            let v = self.value(d)?;
            r = self.op(op, r, v)?;
        }
        Ok(r)
    }

    fn compute_stmt(&mut self, i: usize) -> R {
        let LeafOp::Compute { arith: a, data, cin, .. } = &self.plan.leaves[i].op else { unreachable!() };
        let mut t = self.term(data, a.op)?;
        if a.beta != 1.0 {
            let b = self.splat(a.beta)?;
            t = self.op(ArithOp::Mul, t, b)?;
        }
        let mut r = t;
        if let Some(c) = cin {
            let mut iv = self.value(c)?;
            if a.pre != ElementwiseOp::Identity {
                iv = self.apply(a.pre, iv)?;
            }
            if a.alpha != 1.0 {
                let al = self.splat(a.alpha)?;
                iv = self.op(ArithOp::Mul, iv, al)?;
            }
            r = self.op(a.op, iv, t)?;
        }
        if a.post != ElementwiseOp::Identity {
            r = self.apply(a.post, r)?;
        }
        self.put(i, r)
    }

    fn acc_reg(&self) -> R<Reg> {
        let a = self.st.acc.as_ref().ok_or_else(|| Fail::Fatal(Error::Invalid("no active block".into())))?;
        let mut key = Key::new();
        for l in &a.forced {
            let v = self.tree.loop_(*l).var;
            match self.st.binds.get(&v) {
                Some(Bind::Const(t)) => key.push((v, *t, self.st.vec == Some(v))),
                _ => return Err(Fail::Fatal(Error::Invalid("accumulator loop not unrolled".into()))),
            }
        }
        a.keys.get(&key).copied().ok_or_else(|| Fail::Fatal(Error::Invalid("missing accumulator".into())))
    }

    fn accumulate(&mut self, i: usize) -> R {
        let LeafOp::Compute { arith: a, data, fma, .. } = &self.plan.leaves[i].op else { unreachable!() };
        let acc = self.acc_reg()?;
        self.st.regs.mark(acc);
        if let Some((x, y)) = fma {
            let x = self.value(x)?;
            let y = self.value(y)?;
            self.push(if self.vector() { Inst::VFma { dst: acc, a: x, b: y } } else { Inst::SFma { dst: acc, a: x, b: y } })?;
        } else {
            let mut t = self.term(data, a.op)?;
            if a.beta != 1.0 {
                let b = self.splat(a.beta)?;
                t = self.op(ArithOp::Mul, t, b)?;
            }
            let op = a.op;
            self.push(if self.vector() {
                Inst::VOp { op, dst: acc, a: acc, b: t }
            } else {
                Inst::SOp { op, dst: acc, a: acc, b: t }
            })?;
        }
        self.st.regs.end_stmt();
        Ok(())
    }

    /// Accumulator keys of a block entered at `path[from..]` in the current state.
    fn enum_keys(&self, path: &[LoopId], outputs: &BTreeSet<VarId>) -> Vec<Key> {
        let mut out = Vec::new();
        let mut bound: Vec<VarId> = Vec::new();
        let mut resid = self.st.resid.clone();
        self.keys_rec(path, outputs, &mut bound, &mut resid, &mut Key::new(), &mut out);
        out
    }

    fn keys_rec(
        &self,
        path: &[LoopId],
        outputs: &BTreeSet<VarId>,
        bound: &mut Vec<VarId>,
        resid: &mut Resid,
        key: &mut Key,
        out: &mut Vec<Key>,
    ) {
        let Some((&l, rest)) = path.split_first() else {
            out.push(key.clone());
            return;
        };
        let v = self.tree.loop_(l).var;
        if !outputs.contains(&v) {
            return self.keys_rec(rest, outputs, bound, resid, key, out);
        }
        let trip = Trip::new(self.dfg, v, resid, |u| !self.st.binds.contains_key(&u) && !bound.contains(&u));
        bound.push(v);
        let lanes = self.lanes as i64;
        let full = if self.plan.vector[l.index()] { trip.count / lanes * lanes } else { 0 };
        for t in 0..trip.count {
            let vec = t < full;
            if vec && t % lanes != 0 {
                continue;
            }
            let saved: Vec<_> = trip.after(t).into_iter().map(|(p, r)| (p, resid.insert(p, r))).collect();
            key.push((v, t, vec));
            self.keys_rec(rest, outputs, bound, resid, key, out);
            key.pop();
            for (p, old) in saved.into_iter().rev() {
                match old {
                    Some(r) => resid.insert(p, r),
                    None => resid.remove(&p),
                };
            }
        }
        bound.pop();
    }

    fn block(&mut self, node: NodeId, at: Option<LoopId>) -> R {
        let bp = &self.plan.blocks[&node];
        let li = bp.leaf;
        let LeafOp::Compute { arith: a, cin, .. } = &self.plan.leaves[li].op else { unreachable!() };
        let a = *a;
        let (buf, addr) = self.plan.leaves[li]
            .dst
            .clone()
            .ok_or_else(|| Fail::Fatal(Error::Invalid(alloc::format!("{node} has nowhere to store"))))?;
        let forced = bp.forced(self.tree);
        let keys = self.enum_keys(&bp.path[bp.depth()..], &bp.outputs);
        let (first, last) = self.st.flags.get(&node).copied().unwrap_or((true, true));
        let start = self.insts.len();
        self.st.acc = Some(Active { node, forced: forced.clone(), keys: BTreeMap::new() });

        let mut regs = Vec::with_capacity(keys.len());
        for k in &keys {
            let r = self.alloc()?;
            self.st.regs.own(r);
            self.st.acc.as_mut().expect("active").keys.insert(k.clone(), r);
            regs.push(r);
        }
        self.st.regs.end_stmt();
        let leaf_vec = at.is_none() && self.vector();

        let saved_vec = self.st.vec;
        for (k, &acc) in keys.iter().zip(&regs) {
            self.bind_key(k, leaf_vec);
            if first {
                match cin {
                    Some(Operand::Fwd(q)) => {
                        let src = self.st.fwd[q];
                        self.push(Inst::ApplyPost { op: a.pre, dst: acc, src, vector: self.vector() })?;
                    }
                    Some(Operand::Mem { buf, addr }) => {
                        let kind = self.load_kind(addr);
                        let mem = Mem { buf: *buf, addr: self.affine(addr)? };
                        self.push(Self::load_inst(kind, acc, mem))?;
                        if a.pre != ElementwiseOp::Identity {
                            self.push(Inst::ApplyPost { op: a.pre, dst: acc, src: acc, vector: self.vector() })?;
                        }
                    }
                    None => {
                        let value = a.op.identity();
                        self.push(if self.vector() { Inst::VSplat { dst: acc, value } } else { Inst::SConst { dst: acc, value } })?;
                    }
                }
                if cin.is_some() && a.alpha != 1.0 {
                    let al = self.splat(a.alpha)?;
                    let op = ArithOp::Mul;
                    self.push(if self.vector() {
                        Inst::VOp { op, dst: acc, a: acc, b: al }
                    } else {
                        Inst::SOp { op, dst: acc, a: acc, b: al }
                    })?;
                }
            } else {
                let kind = if self.vector() { VLOAD } else { SLOAD };
                let mem = Mem { buf, addr: self.affine(&addr)? };
                self.push(Self::load_inst(kind, acc, mem))?;
            }
            self.unbind_key(k, saved_vec);
            self.st.regs.end_stmt();
        }

        let body = self.insts.len();
        match at {
            Some(l) => self.loop_body(l)?,
            None => self.accumulate(li)?,
        }
        let exit = self.insts.len();
        for (k, &acc) in keys.iter().zip(&regs) {
            self.bind_key(k, leaf_vec);
            if last && a.post != ElementwiseOp::Identity {
                self.push(Inst::ApplyPost { op: a.post, dst: acc, src: acc, vector: self.vector() })?;
            }
            let mem = Mem { buf, addr: self.affine(&addr)? };
            self.push(if self.vector() { Inst::VStore { src: acc, mem } } else { Inst::SStore { src: acc, mem } })?;
            self.unbind_key(k, saved_vec);
        }
        self.st.regs.invalidate(buf);
        let end = self.insts.len();
        for &r in &regs {
            self.st.regs.release(r);
        }
        self.st.acc = None;
        self.blocks.push(RegisterBlock { node, start, body, exit, end, accumulators: regs });
        Ok(())
    }

    fn bind_key(&mut self, k: &Key, leaf_vec: bool) {
        for &(v, t, vec) in k {
            self.st.binds.insert(v, Bind::Const(t));
            if vec {
                self.st.vec = Some(v);
            }
        }
        if !leaf_vec && !k.iter().any(|e| e.2) {
            self.st.vec = None;
        }
    }

    fn unbind_key(&mut self, k: &Key, saved_vec: Option<VarId>) {
        for &(v, ..) in k {
            self.st.binds.remove(&v);
        }
        self.st.vec = saved_vec;
    }
}
