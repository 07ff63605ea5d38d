//! Wall-clock measurements around the core compiler and VM.

use std::time::{Duration, Instant};

use looptree_core::backend::{compile, Buffers, CompiledKernel, TargetDescriptor};
use looptree_core::feedback::ScheduleStats;
use looptree_core::ir::Dfg;
use looptree_core::lower::lower;
use looptree_core::tuner::Evaluator;
use looptree_core::Result;

/// Lower and compile, recording the elapsed time on the kernel.
pub fn compile_timed(dfg: &Dfg, target: &TargetDescriptor, unroll: Option<usize>) -> Result<CompiledKernel> {
    let t = Instant::now();
    let mut k = compile(&lower(dfg)?, target, unroll)?;
    k.compile_time = t.elapsed();
    Ok(k)
}

/// Deterministic inputs in [-1, 1] for every input slot.
pub fn sample_inputs(dfg: &Dfg, seed: u64) -> Buffers {
    let mut s = seed | 1;
    dfg.input_slots()
        .iter()
        .map(|(slot, dims)| {
            let v = (0..dfg.elements(dims))
                .map(|_| {
                    s ^= s << 13;
                    s ^= s >> 7;
                    s ^= s << 17;
                    (s % 2001) as f32 / 1000.0 - 1.0
                })
                .collect();
            (*slot, v)
        })
        .collect()
}

/// Compile once, then execute repeatedly until `min_time` has elapsed (at
/// least once). GFLOPS is computed from the mean execution time.
pub fn benchmark(dfg: &Dfg, target: &TargetDescriptor, unroll: Option<usize>, min_time: Duration) -> Result<ScheduleStats> {
    let mut k = compile_timed(dfg, target, unroll)?;
    let mut bufs = sample_inputs(dfg, 7);
    let mut reps = 0u64;
    let start = Instant::now();
    loop {
        k.execute(&mut bufs)?;
        reps += 1;
        if start.elapsed() >= min_time {
            break;
        }
    }
    let per_run = start.elapsed().as_secs_f64() / reps as f64;
    let mut stats = ScheduleStats::for_dfg(dfg);
    stats.compile_ms = k.compile_time.as_secs_f64() * 1e3;
    stats.repetitions = reps;
    stats.gflops = if per_run > 0.0 { stats.flops as f64 / per_run / 1e9 } else { 0.0 };
    stats.vm_counters = k.counters;
    Ok(stats)
}

/// Stats without running the kernel: counters come from the program text.
pub fn quick_stats(dfg: &Dfg, target: &TargetDescriptor, unroll: Option<usize>) -> Result<ScheduleStats> {
    let k = compile_timed(dfg, target, unroll)?;
    let mut stats = ScheduleStats::for_dfg(dfg);
    stats.compile_ms = k.compile_time.as_secs_f64() * 1e3;
    stats.vm_counters = k.program.static_counters();
    Ok(stats)
}

/// Tuner evaluator that also times each candidate, so ties on memory
/// accesses are broken by measured speed.
#[derive(Clone, Debug)]
pub struct TimedEvaluator {
    pub unroll: Option<usize>,
    pub min_time: Duration,
}

impl Evaluator for TimedEvaluator {
    fn evaluate(&mut self, dfg: &Dfg, target: &TargetDescriptor) -> Result<ScheduleStats> {
        benchmark(dfg, target, self.unroll, self.min_time)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use looptree_core::models;

    #[test]
    fn benchmark_reports_stats() {
        let d = models::matmul(32, 32, 32);
        let s = benchmark(&d, &TargetDescriptor::avx2(), None, Duration::from_millis(5)).unwrap();
        assert_eq!(s.flops, 2 * 32 * 32 * 32);
        assert!(s.repetitions >= 1 && s.gflops > 0.0);
        let q = quick_stats(&d, &TargetDescriptor::avx2(), None).unwrap();
        assert_eq!(q.vm_counters, s.vm_counters);
    }
}
