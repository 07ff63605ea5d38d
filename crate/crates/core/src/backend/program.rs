use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};

use crate::ir::{ArithOp, ElementwiseOp, NodeId, VarId};

pub type Reg = u16;

/// `base + sum(coeff * iter[slot])`, terms sorted by slot with no zero coefficients.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Affine {
    pub base: i64,
    pub terms: Vec<(u16, i64)>,
}

impl Affine {
    pub fn constant(base: i64) -> Self {
        Affine { base, terms: Vec::new() }
    }

    pub fn add_term(&mut self, slot: u16, coeff: i64) {
        if coeff == 0 {
            return;
        }
        match self.terms.binary_search_by_key(&slot, |t| t.0) {
            Ok(i) => {
                self.terms[i].1 += coeff;
                if self.terms[i].1 == 0 {
                    self.terms.remove(i);
                }
            }
            Err(i) => self.terms.insert(i, (slot, coeff)),
        }
    }

    pub fn add_scaled(&mut self, other: &Affine, k: i64) {
        self.base += other.base * k;
        for &(s, c) in &other.terms {
            self.add_term(s, c * k);
        }
    }

    #[inline]
    pub fn eval(&self, iters: &[i64]) -> i64 {
        let mut v = self.base;
        for &(s, c) in &self.terms {
            v += c * iters[s as usize];
        }
        v
    }
}

impl fmt::Display for Affine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for &(s, c) in &self.terms {
            if !first {
                f.write_str(" + ")?;
            }
            first = false;
            if c == 1 {
                write!(f, "i{s}")?;
            } else {
                write!(f, "{c}*i{s}")?;
            }
        }
        if first {
            write!(f, "{}", self.base)
        } else if self.base != 0 {
            write!(f, " + {}", self.base)
        } else {
            Ok(())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mem {
    pub buf: u16,
    pub addr: Affine,
}

/// Passes when `0 <= expr < bound`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Guard {
    pub expr: Affine,
    pub bound: i64,
}

/// Scalar instructions read and write lane 0 only.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Inst {
    LoopBegin { slot: u16, start: i64, count: u32, step: i64, var: VarId },
    LoopEnd,
    VLoad { dst: Reg, mem: Mem },
    VBroadcast { dst: Reg, mem: Mem },
    VSplat { dst: Reg, value: f32 },
    VOp { op: ArithOp, dst: Reg, a: Reg, b: Reg },
    /// `dst += a * b`
    VFma { dst: Reg, a: Reg, b: Reg },
    VStore { src: Reg, mem: Mem },
    SLoad { dst: Reg, mem: Mem },
    /// Loads `fill` when any guard fails; the address is only evaluated otherwise.
    SLoadGuard { dst: Reg, mem: Mem, guards: Vec<Guard>, fill: f32 },
    SConst { dst: Reg, value: f32 },
    SOp { op: ArithOp, dst: Reg, a: Reg, b: Reg },
    SFma { dst: Reg, a: Reg, b: Reg },
    SStore { src: Reg, mem: Mem },
    ApplyPost { op: ElementwiseOp, dst: Reg, src: Reg, vector: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstClass {
    Control,
    Load,
    Store,
    Vector,
    Scalar,
}

impl Inst {
    pub fn class(&self) -> InstClass {
        match self {
            Inst::LoopBegin { .. } | Inst::LoopEnd => InstClass::Control,
            Inst::VLoad { .. } | Inst::VBroadcast { .. } | Inst::SLoad { .. } | Inst::SLoadGuard { .. } => {
                InstClass::Load
            }
            Inst::VStore { .. } | Inst::SStore { .. } => InstClass::Store,
            Inst::VSplat { .. } | Inst::VOp { .. } | Inst::VFma { .. } => InstClass::Vector,
            Inst::ApplyPost { vector: true, .. } => InstClass::Vector,
            Inst::SConst { .. } | Inst::SOp { .. } | Inst::SFma { .. } | Inst::ApplyPost { .. } => InstClass::Scalar,
        }
    }

    /// Register written by the instruction, if any.
    pub fn def(&self) -> Option<Reg> {
        match *self {
            Inst::VLoad { dst, .. }
            | Inst::VBroadcast { dst, .. }
            | Inst::VSplat { dst, .. }
            | Inst::VOp { dst, .. }
            | Inst::VFma { dst, .. }
            | Inst::SLoad { dst, .. }
            | Inst::SLoadGuard { dst, .. }
            | Inst::SConst { dst, .. }
            | Inst::SOp { dst, .. }
            | Inst::SFma { dst, .. } => Some(dst),
            Inst::ApplyPost { dst, .. } => Some(dst),
            _ => None,
        }
    }

    /// Registers read by the instruction.
    pub fn uses(&self) -> Vec<Reg> {
        match *self {
            Inst::VOp { a, b, .. } | Inst::SOp { a, b, .. } => alloc::vec![a, b],
            Inst::VFma { dst, a, b } | Inst::SFma { dst, a, b } => alloc::vec![dst, a, b],
            Inst::VStore { src, .. } | Inst::SStore { src, .. } => alloc::vec![src],
            Inst::ApplyPost { src, .. } => alloc::vec![src],
            _ => Vec::new(),
        }
    }

    pub fn mem(&self) -> Option<&Mem> {
        match self {
            Inst::VLoad { mem, .. }
            | Inst::VBroadcast { mem, .. }
            | Inst::VStore { mem, .. }
            | Inst::SLoad { mem, .. }
            | Inst::SLoadGuard { mem, .. }
            | Inst::SStore { mem, .. } => Some(mem),
            _ => None,
        }
    }

    fn flops(&self, lanes: u64) -> u64 {
        match self {
            Inst::VOp { .. } => lanes,
            Inst::VFma { .. } => 2 * lanes,
            Inst::SOp { .. } => 1,
            Inst::SFma { .. } => 2,
            Inst::ApplyPost { op: ElementwiseOp::Identity, .. } => 0,
            Inst::ApplyPost { vector: true, .. } => lanes,
            Inst::ApplyPost { .. } => 1,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", content = "slot", rename_all = "lowercase"))]
pub enum BufKind {
    Input(usize),
    Output(usize),
    Scratch,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BufferDecl {
    pub kind: BufKind,
    pub len: usize,
    /// Node whose values live here.
    pub node: NodeId,
}

/// Instruction range where a node's output block lives in registers.
/// `[start, body)` initializes or loads the accumulators, `[exit, end)` stores them.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RegisterBlock {
    pub node: NodeId,
    pub start: usize,
    pub body: usize,
    pub exit: usize,
    pub end: usize,
    pub accumulators: Vec<Reg>,
}

/// Instruction range produced by one outermost unrolled loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Region {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KernelProgram {
    pub lanes: usize,
    pub vregs: usize,
    pub iter_slots: usize,
    pub buffers: Vec<BufferDecl>,
    pub insts: Vec<Inst>,
    pub blocks: Vec<RegisterBlock>,
    pub unrolled: Vec<Region>,
    /// Loop variable names by id, for the disassembly.
    pub var_names: Vec<String>,
}

/// Executed (or statically predicted) instruction tallies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Counters {
    pub instructions: u64,
    pub loads: u64,
    pub stores: u64,
    pub vector_ops: u64,
    pub scalar_ops: u64,
    pub flops: u64,
}

impl Counters {
    pub fn memory_accesses(&self) -> u64 {
        self.loads + self.stores
    }

    #[inline]
    pub(crate) fn record(&mut self, inst: &Inst, times: u64, lanes: u64) {
        self.instructions += times;
        match inst.class() {
            InstClass::Load => self.loads += times,
            InstClass::Store => self.stores += times,
            InstClass::Vector => self.vector_ops += times,
            InstClass::Scalar => self.scalar_ops += times,
            InstClass::Control => {}
        }
        self.flops += inst.flops(lanes) * times;
    }
}

impl KernelProgram {
    /// Counters implied by the loop structure alone. Programs have no
    /// data-dependent control flow, so this equals what the VM records.
    pub fn static_counters(&self) -> Counters {
        let mut c = Counters::default();
        let mut mult: Vec<u64> = alloc::vec![1];
        let lanes = self.lanes as u64;
        for inst in &self.insts {
            let m = *mult.last().expect("loop stack");
            match inst {
                Inst::LoopBegin { count, .. } => {
                    c.record(inst, m, lanes);
                    mult.push(m * *count as u64);
                }
                Inst::LoopEnd => {
                    c.record(inst, m, lanes);
                    mult.pop();
                }
                _ => c.record(inst, m, lanes),
            }
        }
        c
    }

    pub fn count_class(&self, class: InstClass) -> usize {
        self.insts.iter().filter(|i| i.class() == class).count()
    }

    pub fn scratch_elements(&self) -> usize {
        self.buffers.iter().filter(|b| b.kind == BufKind::Scratch).map(|b| b.len).sum()
    }

    pub fn max_register(&self) -> Option<Reg> {
        self.insts.iter().flat_map(|i| i.def().into_iter().chain(i.uses())).max()
    }

    fn buf_name(&self, b: u16) -> String {
        match self.buffers.get(b as usize).map(|d| d.kind) {
            Some(BufKind::Input(s)) => alloc::format!("in{s}"),
            Some(BufKind::Output(s)) => alloc::format!("out{s}"),
            _ => alloc::format!("tmp{b}"),
        }
    }

    pub fn disassemble(&self) -> String {
        let mut s = String::new();
        let mut depth = 0usize;
        let mem = |m: &Mem| alloc::format!("{}[{}]", self.buf_name(m.buf), m.addr);
        for inst in &self.insts {
            if matches!(inst, Inst::LoopEnd) {
                depth = depth.saturating_sub(1);
            }
            for _ in 0..depth {
                s.push_str("  ");
            }
            let _ = match inst {
                Inst::LoopBegin { slot, start, count, step, var } => {
                    depth += 1;
                    let name = self.var_names.get(var.index()).map_or("?", |n| n.as_str());
                    write!(s, "loop i{slot} = {start} step {step} x {count}  ; {name}")
                }
                Inst::LoopEnd => write!(s, "endloop"),
                Inst::VLoad { dst, mem: m } => write!(s, "vload v{dst}, {}", mem(m)),
                Inst::VBroadcast { dst, mem: m } => write!(s, "vbroadcast v{dst}, {}", mem(m)),
                Inst::VSplat { dst, value } => write!(s, "vsplat v{dst}, {value:?}"),
                Inst::VOp { op, dst, a, b } => write!(s, "v{} v{dst}, v{a}, v{b}", op.name()),
                Inst::VFma { dst, a, b } => write!(s, "vfma v{dst}, v{a}, v{b}"),
                Inst::VStore { src, mem: m } => write!(s, "vstore {}, v{src}", mem(m)),
                Inst::SLoad { dst, mem: m } => write!(s, "sload v{dst}, {}", mem(m)),
                Inst::SLoadGuard { dst, mem: m, guards, fill } => {
                    let g: Vec<String> =
                        guards.iter().map(|g| alloc::format!("0 <= {} < {}", g.expr, g.bound)).collect();
                    write!(s, "sload.guard v{dst}, {} if {} else {fill:?}", mem(m), g.join(" && "))
                }
                Inst::SConst { dst, value } => write!(s, "sconst v{dst}, {value:?}"),
                Inst::SOp { op, dst, a, b } => write!(s, "s{} v{dst}, v{a}, v{b}", op.name()),
                Inst::SFma { dst, a, b } => write!(s, "sfma v{dst}, v{a}, v{b}"),
                Inst::SStore { src, mem: m } => write!(s, "sstore {}, v{src}", mem(m)),
                Inst::ApplyPost { op, dst, src, vector } => {
                    write!(s, "{}{} v{dst}, v{src}", if *vector { "v" } else { "s" }, op.name())
                }
            };
            s.push('\n');
        }
        s
    }
}

/// Structural checks every accepted program satisfies.
pub mod scan {
    use super::*;

    /// All register operands are inside the register file.
    pub fn registers_in_range(p: &KernelProgram) -> bool {
        p.max_register().is_none_or(|r| (r as usize) < p.vregs)
    }

    /// Accumulators are never stored to memory and reloaded inside a block
    /// body, never overwritten by anything but an accumulate, and each one
    /// is stored exactly once on block exit.
    pub fn no_spill(p: &KernelProgram) -> bool {
        p.blocks.iter().all(|b| {
            let body_ok = p.insts[b.body..b.exit].iter().all(|i| {
                let stores_acc = matches!(i, Inst::VStore { src, .. } | Inst::SStore { src, .. } if b.accumulators.contains(src));
                let clobbers = match i {
                    Inst::VOp { dst, a, b: rb, .. } | Inst::SOp { dst, a, b: rb, .. } => {
                        b.accumulators.contains(dst) && a != dst && rb != dst
                    }
                    Inst::VFma { .. } | Inst::SFma { .. } => false,
                    Inst::ApplyPost { dst, src, .. } => b.accumulators.contains(dst) && dst != src,
                    other => other.def().is_some_and(|d| b.accumulators.contains(&d)),
                };
                !(stores_acc || clobbers)
            });
            let mut stored: Vec<Reg> = p.insts[b.exit..b.end]
                .iter()
                .filter_map(|i| match i {
                    Inst::VStore { src, .. } | Inst::SStore { src, .. } if b.accumulators.contains(src) => Some(*src),
                    _ => None,
                })
                .collect();
            stored.sort();
            let mut accs = b.accumulators.clone();
            accs.sort();
            body_ok && stored == accs
        })
    }

    /// Every unrolled region fits the limit.
    pub fn unroll_bound(p: &KernelProgram, limit: usize) -> bool {
        p.unrolled.iter().all(|r| r.end - r.start <= limit)
    }

    /// Loop markers are balanced.
    pub fn balanced(p: &KernelProgram) -> bool {
        let mut depth = 0i64;
        for i in &p.insts {
            match i {
                Inst::LoopBegin { .. } => depth += 1,
                Inst::LoopEnd => depth -= 1,
                _ => {}
            }
            if depth < 0 {
                return false;
            }
        }
        depth == 0
    }
}
