//! Interpreter for [`KernelProgram`]s. Scalar instructions operate on lane 0.

use alloc::vec;
use alloc::vec::Vec;

use super::program::{Counters, Inst, KernelProgram, Mem};
use crate::error::{Error, Result};

const MAX_LANES: usize = 16;

struct Frame {
    begin: usize,
    left: u32,
    slot: usize,
    step: i64,
}

fn oob(mem: &Mem, at: i64) -> Error {
    Error::Invalid(alloc::format!("address {at} out of bounds in buffer {}", mem.buf))
}

/// Run `p` over `bufs` (indexed like `p.buffers`) and return what executed.
pub fn run(p: &KernelProgram, bufs: &mut [Vec<f32>]) -> Result<Counters> {
    if bufs.len() != p.buffers.len() {
        return Err(Error::Invalid(alloc::format!("expected {} buffers, got {}", p.buffers.len(), bufs.len())));
    }
    let lanes = p.lanes;
    let nregs = p.vregs.max(p.max_register().map_or(0, |r| r as usize + 1));
    let mut regs = vec![[0.0f32; MAX_LANES]; nregs];
    let mut iters = vec![0i64; p.iter_slots.max(1)];
    let ends = loop_ends(&p.insts)?;
    let mut stack: Vec<Frame> = Vec::new();
    let mut c = Counters::default();
    let lanes64 = lanes as u64;
    let mut pc = 0;
    while pc < p.insts.len() {
        let inst = &p.insts[pc];
        c.record(inst, 1, lanes64);
        match inst {
            Inst::LoopBegin { slot, start, count, step, .. } => {
                if *count == 0 {
                    pc = ends[pc] + 1;
                    continue;
                }
                iters[*slot as usize] = *start;
                stack.push(Frame { begin: pc, left: count - 1, slot: *slot as usize, step: *step });
            }
            Inst::LoopEnd => {
                let f = stack.last_mut().ok_or_else(|| Error::Invalid("unbalanced loop end".into()))?;
                if f.left > 0 {
                    f.left -= 1;
                    iters[f.slot] += f.step;
                    pc = f.begin + 1;
                    continue;
                }
                stack.pop();
            }
            Inst::VLoad { dst, mem } => {
                let a = mem.addr.eval(&iters);
                let src = slice(bufs, mem, a, lanes)?;
                regs[*dst as usize][..lanes].copy_from_slice(src);
            }
            Inst::VBroadcast { dst, mem } | Inst::SLoad { dst, mem } => {
                let a = mem.addr.eval(&iters);
                let v = slice(bufs, mem, a, 1)?[0];
                regs[*dst as usize][..lanes].fill(v);
            }
            Inst::SLoadGuard { dst, mem, guards, fill } => {
                let inside = guards.iter().all(|g| {
                    let e = g.expr.eval(&iters);
                    (0..g.bound).contains(&e)
                });
                let v = if inside { slice(bufs, mem, mem.addr.eval(&iters), 1)?[0] } else { *fill };
                regs[*dst as usize][0] = v;
            }
            Inst::VSplat { dst, value } | Inst::SConst { dst, value } => {
                regs[*dst as usize][..lanes].fill(*value);
            }
            Inst::VOp { op, dst, a, b } => {
                let (x, y) = (regs[*a as usize], regs[*b as usize]);
                let d = &mut regs[*dst as usize];
                for l in 0..lanes {
                    d[l] = op.apply(x[l], y[l]);
                }
            }
            Inst::SOp { op, dst, a, b } => {
                let v = op.apply(regs[*a as usize][0], regs[*b as usize][0]);
                regs[*dst as usize][0] = v;
            }
            Inst::VFma { dst, a, b } => {
                let (x, y) = (regs[*a as usize], regs[*b as usize]);
                let d = &mut regs[*dst as usize];
                for l in 0..lanes {
                    d[l] += x[l] * y[l];
                }
            }
            Inst::SFma { dst, a, b } => {
                let v = regs[*a as usize][0] * regs[*b as usize][0];
                regs[*dst as usize][0] += v;
            }
            Inst::ApplyPost { op, dst, src, vector } => {
                let s = regs[*src as usize];
                let n = if *vector { lanes } else { 1 };
                let d = &mut regs[*dst as usize];
                for l in 0..n {
                    d[l] = op.apply(s[l]);
                }
            }
            Inst::VStore { src, mem } => {
                let a = mem.addr.eval(&iters);
                let v = regs[*src as usize];
                slice_mut(bufs, mem, a, lanes)?.copy_from_slice(&v[..lanes]);
            }
            Inst::SStore { src, mem } => {
                let a = mem.addr.eval(&iters);
                slice_mut(bufs, mem, a, 1)?[0] = regs[*src as usize][0];
            }
        }
        pc += 1;
    }
    Ok(c)
}

fn slice<'b>(bufs: &'b [Vec<f32>], mem: &Mem, at: i64, n: usize) -> Result<&'b [f32]> {
    let b = bufs.get(mem.buf as usize).ok_or_else(|| oob(mem, at))?;
    usize::try_from(at).ok().and_then(|a| b.get(a..a + n)).ok_or_else(|| oob(mem, at))
}

fn slice_mut<'b>(bufs: &'b mut [Vec<f32>], mem: &Mem, at: i64, n: usize) -> Result<&'b mut [f32]> {
    let b = bufs.get_mut(mem.buf as usize).ok_or_else(|| oob(mem, at))?;
    usize::try_from(at).ok().and_then(|a| b.get_mut(a..a + n)).ok_or_else(|| oob(mem, at))
}

fn loop_ends(insts: &[Inst]) -> Result<Vec<usize>> {
    let mut ends = vec![0; insts.len()];
    let mut open = Vec::new();
    for (i, inst) in insts.iter().enumerate() {
        match inst {
            Inst::LoopBegin { .. } => open.push(i),
            Inst::LoopEnd => {
                let b = open.pop().ok_or_else(|| Error::Invalid("unbalanced loop end".into()))?;
                ends[b] = i;
            }
            _ => {}
        }
    }
    if !open.is_empty() {
        return Err(Error::Invalid("unterminated loop".into()));
    }
    Ok(ends)
}
