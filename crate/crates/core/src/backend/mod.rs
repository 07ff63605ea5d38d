//! Compilation of a [`LoopTree`] into a [`KernelProgram`] for the kernel VM.
//!
//! The innermost loop of a nest is vectorized when every access along it is
//! unit-stride or invariant; otherwise it runs scalar. Reductions are register
//! blocked at the outermost loop whose accumulators fit the register file, and
//! loops are unrolled innermost-first while the unrolled region stays within
//! the instruction limit.

mod emit;
mod interleave;
mod plan;
pub mod program;
pub mod target;
mod trip;
pub mod vm;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::time::Duration;

pub use program::{Affine, BufKind, BufferDecl, Counters, Guard, Inst, InstClass, KernelProgram, Mem, Reg, Region, RegisterBlock};
pub use target::TargetDescriptor;

use crate::error::{Error, Result};
use crate::ir::NodeKind;
use crate::lower::LoopTree;

/// Dense buffers keyed by slot.
pub type Buffers = BTreeMap<usize, Vec<f32>>;

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SlotInfo {
    /// Dimension names and extents, row-major.
    pub dims: Vec<(String, usize)>,
}

impl SlotInfo {
    pub fn len(&self) -> usize {
        self.dims.iter().map(|d| d.1).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompileOptions {
    /// Instruction budget of an unrolled region; the target default when `None`.
    pub unroll_limit: Option<usize>,
    /// Reorder independent instructions inside unrolled regions.
    pub interleave: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { unroll_limit: None, interleave: true }
    }
}

#[derive(Clone, Debug)]
pub struct CompiledKernel {
    pub program: KernelProgram,
    pub inputs: BTreeMap<usize, SlotInfo>,
    pub outputs: BTreeMap<usize, SlotInfo>,
    /// Wall time of compilation; zero unless set by a caller with a clock.
    pub compile_time: Duration,
    /// Tallies of the most recent execution.
    pub counters: Counters,
}

pub fn compile(tree: &LoopTree, target: &TargetDescriptor, unroll_limit: Option<usize>) -> Result<CompiledKernel> {
    compile_with(tree, target, &CompileOptions { unroll_limit, ..CompileOptions::default() })
}

pub fn compile_with(tree: &LoopTree, target: &TargetDescriptor, opts: &CompileOptions) -> Result<CompiledKernel> {
    target.check()?;
    let limit = opts.unroll_limit.unwrap_or(target.default_unroll_limit);
    if limit == 0 {
        return Err(Error::ZeroUnroll);
    }
    let mut plan = plan::plan(tree, target)?;
    let out = emit::emit(tree, &mut plan, target, limit)?;
    let mut insts = out.insts;
    if opts.interleave {
        let cuts: BTreeSet<usize> = out.blocks.iter().flat_map(|b| [b.start, b.body, b.exit, b.end]).collect();
        interleave::run(&mut insts, &out.regions, &cuts);
    }
    let dfg = &tree.dfg;
    let slot_info = |dims: &[crate::ir::VarId]| SlotInfo {
        dims: dims.iter().map(|d| (String::from(dfg.name(*d)), dfg.size(*d))).collect(),
    };
    let program = KernelProgram {
        lanes: target.lanes,
        vregs: target.vregs,
        iter_slots: out.slots,
        buffers: plan.buffers,
        insts,
        blocks: out.blocks,
        unrolled: out.regions,
        var_names: dfg.vars().iter().map(|v| v.name.clone()).collect(),
    };
    Ok(CompiledKernel {
        program,
        inputs: dfg.input_slots().iter().map(|(s, d)| (*s, slot_info(d))).collect(),
        outputs: dfg.output_slots().iter().map(|(s, d)| (*s, slot_info(d))).collect(),
        compile_time: Duration::ZERO,
        counters: Counters::default(),
    })
}

/// Compile a tree of several nests, possibly sharing outer loops, as one kernel.
pub fn compile_tree(tree: &LoopTree, target: &TargetDescriptor) -> Result<CompiledKernel> {
    compile(tree, target, None)
}

/// Compile a reduction-free, one-input nest (copy, transpose, broadcast, slice).
pub fn compile_single_operand(tree: &LoopTree, target: &TargetDescriptor) -> Result<CompiledKernel> {
    let dfg = &tree.dfg;
    for n in dfg.nodes() {
        if matches!(n.kind, NodeKind::Arith(_)) && !dfg.reduction_dims(n).is_empty() {
            return Err(Error::HasReduction(n.id));
        }
    }
    let inputs = dfg.input_slots().len();
    if inputs != 1 {
        return Err(Error::NotSingleOperand(inputs));
    }
    compile(tree, target, None)
}

impl CompiledKernel {
    /// Run the kernel. Inputs must be present with matching sizes; outputs are
    /// created (or overwritten) in `bufs`.
    pub fn execute(&mut self, bufs: &mut Buffers) -> Result<()> {
        for (slot, info) in &self.inputs {
            let b = bufs.get(slot).ok_or(Error::MissingSlot(*slot))?;
            if b.len() != info.len() {
                return Err(Error::ShapeMismatch { slot: *slot, expected: info.len(), got: b.len() });
            }
        }
        for (slot, info) in &self.outputs {
            if let Some(b) = bufs.get(slot) {
                if b.len() != info.len() {
                    return Err(Error::ShapeMismatch { slot: *slot, expected: info.len(), got: b.len() });
                }
            }
        }
        let mut table: Vec<Vec<f32>> = self
            .program
            .buffers
            .iter()
            .map(|d| match d.kind {
                BufKind::Input(s) => bufs.remove(&s).unwrap_or_default(),
                BufKind::Output(_) | BufKind::Scratch => alloc::vec![0.0; d.len],
            })
            .collect();
        let res = vm::run(&self.program, &mut table);
        for (d, b) in self.program.buffers.iter().zip(table) {
            match d.kind {
                BufKind::Input(s) | BufKind::Output(s) => {
                    bufs.insert(s, b);
                }
                BufKind::Scratch => {}
            }
        }
        self.counters = res?;
        Ok(())
    }
}
