//! One test per acceptance criterion. Run with `--nocapture` to see the
//! measured figures behind each PASS line.

mod lowering;

use std::sync::Mutex;
use std::time::{Duration, Instant};

use looptree::bench::{compile_timed, sample_inputs};
use looptree::session::Session;
use looptree_core::backend::program::scan;
use looptree_core::backend::{compile, TargetDescriptor};
use looptree_core::feedback::{arithmetic_intensity, count_flops, reference_eval};
use looptree_core::ir::Dfg;
use looptree_core::lower::{alloc_size, lower};
use looptree_core::models;
use looptree_core::schedule::{random_actions, replay, Action};
use looptree_core::tuner::{StaticEvaluator, Tuner};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(got: &[f32], want: &[f32]) -> bool {
    got.len() == want.len() && got.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-4 * b.abs().max(1.0))
}

fn random_schedule(base: &Dfg, rng: &mut StdRng, max_steps: usize) -> (Vec<Action>, Dfg) {
    let steps = rng.gen_range(0..=max_steps);
    let actions = random_actions(base, steps, &mut |n| rng.gen_range(0..n));
    let d = replay(base, &actions).expect("random actions apply");
    (actions, d)
}

const ORACLE_MODELS: [&str; 8] = ["mm16", "mm64", "conv1d", "pool", "transpose", "concat", "broadcast_add", "mlp"];

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(1);
    let targets = TargetDescriptor::all();
    let mut cases = 0;
    for name in ORACLE_MODELS {
        let base = models::by_name(name).unwrap();
        for case in 0..100 {
            let (actions, d) = random_schedule(&base, &mut rng, 12);
            let t = &targets[case % 3];
            let limit = if rng.gen_bool(0.3) { Some(rng.gen_range(1..400)) } else { None };
            let mut k = compile(&lower(&d).unwrap(), t, limit).map_err(|e| format!("{name} {actions:?}: {e}"))?;
            let mut bufs = sample_inputs(&d, case as u64 + 11);
            let want = reference_eval(&d, &bufs).unwrap();
            k.execute(&mut bufs).map_err(|e| format!("{name}: {e}"))?;
            for (slot, w) in &want {
                ensure!(close(&bufs[slot], w), "{name} slot {slot} differs under {actions:?} on {}", t.name);
            }
            cases += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "suite took {secs:.1} s");
    Ok(format!("{cases} random schedules over {} models agree within 1e-4 ({secs:.1} s)", ORACLE_MODELS.len()))
}

fn golden_lowering() -> Outcome {
    let goldens = [
        include_str!("golden/lower1.txt"),
        include_str!("golden/lower2.txt"),
        include_str!("golden/lower3.txt"),
        include_str!("golden/lower4.txt"),
    ];
    let all = lowering::all();
    for (l, g) in all.iter().zip(goldens) {
        let text = lowering::render(l);
        ensure!(text == g, "{} rendering differs:\n{text}", l.name);
        let tree = lower(&l.dfg).unwrap();
        let a = alloc_size(&tree, l.node).unwrap();
        ensure!(a == l.alloc, "{} alloc {a}, expected {}", l.name, l.alloc);
    }
    let dup = lower(&all[2].dfg).unwrap().loops.iter().filter(|l| all[2].dfg.name(l.var) == "z").count();
    ensure!(dup == 2, "reduction case has {dup} z loops");
    Ok("4 loop trees byte-identical to goldens; allocs 1, |y||z|=12, duplicated z, |z|=4".into())
}

fn count_accumulators_5x64() -> Result<usize, String> {
    let base = models::matmul(512, 512, 512);
    let actions = vec![
        Action::Split { var: "m".into(), factor: 5 },
        Action::Split { var: "n".into(), factor: 64 },
    ];
    let d = replay(&base, &actions).unwrap();
    let add = d.nodes().find(|n| n.kind.arith().is_some_and(|a| a.op == looptree_core::ir::ArithOp::Add)).unwrap().id;
    let mul = d.node(add).inputs[0];
    let order: Vec<String> = ["m_o", "n_o", "k", "m_i", "n_i"].iter().map(|s| s.to_string()).collect();
    let d = replay(&d, &[Action::Reorder { nodes: vec![mul, add], order }]).unwrap();
    let k = compile(&lower(&d).unwrap(), &TargetDescriptor::avx512(), None).map_err(|e| e.to_string())?;
    let blocks = &k.program.blocks;
    ensure!(!blocks.is_empty(), "no register block");
    ensure!(scan::no_spill(&k.program), "5x64 kernel spills");
    Ok(blocks.iter().map(|b| b.accumulators.len()).max().unwrap())
}

fn no_spill_and_unroll() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2);
    let targets = TargetDescriptor::all();
    let mut kernels = 0;
    let mut violations = Vec::new();
    for round in 0..1000 {
        let name = models::NAMES[round % models::NAMES.len()];
        let (actions, d) = random_schedule(&models::by_name(name).unwrap(), &mut rng, 14);
        let t = &targets[rng.gen_range(0..3)];
        let limit = if rng.gen_bool(0.5) { Some(rng.gen_range(1..400)) } else { None };
        let k = compile(&lower(&d).unwrap(), t, limit).map_err(|e| format!("{name} {actions:?}: {e}"))?;
        let p = &k.program;
        kernels += 1;
        if !scan::no_spill(p) {
            violations.push(format!("spill: {name} {actions:?}"));
        }
        if !scan::unroll_bound(p, limit.unwrap_or(t.default_unroll_limit)) {
            violations.push(format!("unroll: {name} {actions:?}"));
        }
        if !scan::registers_in_range(p) || !scan::balanced(p) {
            violations.push(format!("structure: {name} {actions:?}"));
        }
    }
    ensure!(violations.is_empty(), "{} violations, first: {}", violations.len(), violations[0]);
    let accs = count_accumulators_5x64()?;
    ensure!(accs == 20, "5x64 block uses {accs} accumulators");
    Ok(format!("{kernels} fuzzed kernels clean; 5x64 block on avx512 holds 20 accumulators"))
}

fn compile_speed() -> Outcome {
    let base = models::matmul(512, 512, 512);
    let t = TargetDescriptor::avx512();
    let mut tuner = Tuner::new(&base, &t, 300, StaticEvaluator::default());
    tuner.verify_fraction = 0.0;
    while tuner.step().is_some() {}
    let best = replay(&base, &tuner.best_actions()).unwrap();
    let loops = lower(&best).unwrap().loops.len();
    let mut times: Vec<Duration> = (0..100).map(|_| compile_timed(&best, &t, None).unwrap().compile_time).collect();
    times.sort();
    let median = times[50].as_secs_f64() * 1e3;
    ensure!(median < 50.0, "median compile {median:.2} ms");
    Ok(format!("tuned MM-512 ({loops} loops) compiles in {median:.2} ms median over 100 runs"))
}

fn tuner_efficacy() -> Outcome {
    let start = Instant::now();
    let base = models::matmul(256, 256, 256);
    let t = TargetDescriptor::avx512();
    let naive = compile(&lower(&base).unwrap(), &t, None).unwrap().program.static_counters().memory_accesses();
    let result = Tuner::new(&base, &t, 500, StaticEvaluator::default()).run();
    ensure!(result.leaderboard.len() <= 500, "{} candidates", result.leaderboard.len());
    let best = replay(&base, &result.best).unwrap();
    let mut k = compile(&lower(&best).unwrap(), &t, None).unwrap();
    let mut bufs = sample_inputs(&best, 5);
    let want = reference_eval(&best, &bufs).unwrap();
    k.execute(&mut bufs).unwrap();
    ensure!(want.iter().all(|(s, w)| close(&bufs[s], w)), "best schedule is wrong");
    let tuned = k.counters.memory_accesses();
    let ratio = naive as f64 / tuned as f64;
    let secs = start.elapsed().as_secs_f64();
    ensure!(ratio >= 2.0, "only {ratio:.2}x fewer memory accesses");
    ensure!(secs < 300.0, "tuning took {secs:.0} s");
    Ok(format!(
        "MM-256: {naive} -> {tuned} memory accesses ({ratio:.1}x) with {} candidates in {secs:.1} s",
        result.leaderboard.len()
    ))
}

fn analytics() -> Outcome {
    let base = models::matmul(512, 512, 512);
    let exact = 268_435_456.0 / (4.0 * 3.0 * 512.0 * 512.0);
    let mut rng = StdRng::seed_from_u64(3);
    let mut d = base.clone();
    for i in 0..=50 {
        let f = count_flops(&d);
        let ai = arithmetic_intensity(&d);
        ensure!(f == 268_435_456, "flops {f} after {i} mutations");
        ensure!((ai - exact).abs() <= 1e-9, "intensity {ai} after {i} mutations");
        let a = random_actions(&d, 1, &mut |n| rng.gen_range(0..n));
        d = replay(&d, &a).unwrap();
    }
    Ok(format!("MM-512 flops 268435456, intensity {exact:.6}, unchanged over 50 mutations"))
}

fn loop_count(d: &Dfg) -> usize {
    lower(d).map(|t| t.loops.len()).unwrap_or(usize::MAX)
}

/// Random message, valid or not, for the session's current state.
fn random_message(rng: &mut StdRng, s: &Session) -> String {
    let names = ["mm16", "mm64", "mlp", "conv1d", "pool", "transpose", "broadcast_add"];
    let Some(d) = s.current() else {
        return json!({"cmd": "load", "model": names[rng.gen_range(0..names.len())]}).to_string();
    };
    let leaves: Vec<String> =
        d.vars().iter().filter(|v| v.is_leaf() && d.nodes().any(|n| n.order.contains(&v.id))).map(|v| v.name.clone()).collect();
    let nodes: Vec<u32> = d.node_ids().map(|n| n.0).collect();
    let var = |rng: &mut StdRng| leaves[rng.gen_range(0..leaves.len())].clone();
    let crowded = loop_count(d) > 10;
    let r = rng.gen_range(0..100);
    let msg = match r {
        _ if crowded && r < 40 => json!({"cmd": "undo"}),
        0..=17 => json!({"cmd": "split", "var": var(rng), "factor": rng.gen_range(1..9)}),
        18..=33 => {
            let n = nodes[rng.gen_range(0..nodes.len())];
            let mut order: Vec<String> =
                d.node(looptree_core::ir::NodeId(n)).order.iter().map(|v| d.name(*v).to_string()).collect();
            order.shuffle(rng);
            if rng.gen_bool(0.5) {
                json!({"cmd": "reorder", "order": order, "nodes": [n]})
            } else {
                json!({"cmd": "reorder", "order": order})
            }
        }
        34..=41 => json!({"cmd": "stage", "node": nodes[rng.gen_range(0..nodes.len())], "var": var(rng)}),
        42..=45 => json!({"cmd": "unstage", "node": nodes[rng.gen_range(0..nodes.len())], "var": var(rng)}),
        46..=55 => json!({"cmd": "undo"}),
        56..=58 => {
            let t = ["avx2", "avx512", "neon"][rng.gen_range(0..3)];
            json!({"cmd": "set_target", "target": t})
        }
        59..=60 => {
            let limit = [Value::Null, json!(16), json!(64), json!(320)][rng.gen_range(0..4)].clone();
            json!({"cmd": "set_unroll", "limit": limit})
        }
        61..=63 => {
            let cmd = ["show_tree", "show_kernel", "show_dfg", "actions"][rng.gen_range(0..4)];
            json!({"cmd": cmd})
        }
        64 => json!({"cmd": "bench", "min_ms": rng.gen_range(0..20)}),
        65..=66 => json!({"cmd": "tune_step", "budget": rng.gen_range(1..25)}),
        67 => json!({"cmd": "load", "model": names[rng.gen_range(0..names.len())]}),
        // invalid from here on
        68..=71 => json!({"cmd": "reorder", "order": [var(rng)]}),
        72..=74 => json!({"cmd": "split", "var": "nope", "factor": 2}),
        75..=76 => json!({"cmd": "split", "var": var(rng), "factor": 0}),
        77..=78 => json!({"cmd": "split", "var": var(rng)}),
        79..=80 => json!({"cmd": "stage", "node": 999, "var": var(rng)}),
        81..=82 => json!({"cmd": "set_target", "target": "z80"}),
        83 => json!({"cmd": "set_unroll", "limit": 0}),
        84..=85 => json!({"cmd": "warp"}),
        86..=87 => json!({"cmd": "load", "model": "nope"}),
        88 => json!({"cmd": "load", "dfg": {"vars": [], "nodes": [{"id": 0}]}}),
        89..=90 => json!({"nocmd": true}),
        91 => json!({"cmd": "reorder", "order": [var(rng), var(rng), var(rng), var(rng)], "nodes": [nodes[0]]}),
        92..=95 => return ["{", "[]", "null", "\"split\"", ""][rng.gen_range(0..5)].to_string(),
        _ => json!({"cmd": "split", "var": var(rng), "factor": 2, "bogus": 1}),
    };
    msg.to_string()
}

fn protocol_fuzz() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let mut s = Session::new();
    let mut accepted = Vec::new();
    let (mut errors, mut slowest) = (0, 0.0f64);
    for i in 0..10_000 {
        let msg = random_message(&mut rng, &s);
        let before = (s.tree(), s.actions());
        let small = s.current().is_none_or(|d| loop_count(d) <= 12);
        let t = Instant::now();
        let reply = s.handle_line(&msg);
        let ms = t.elapsed().as_secs_f64() * 1e3;
        if small {
            slowest = slowest.max(ms);
            ensure!(ms < 200.0, "message {i} `{msg}` took {ms:.1} ms");
        }
        if reply.get("error").is_some() {
            errors += 1;
            ensure!((s.tree(), s.actions()) == before, "state changed on error reply to `{msg}`: {reply}");
        } else {
            ensure!(reply.get("ok") == Some(&json!(true)), "reply without ok or error: {reply}");
            accepted.push(msg.clone());
        }
        if let (Some(init), Some(cur)) = (s.initial(), s.current()) {
            ensure!(&replay(init, &s.actions()).unwrap() == cur, "replay diverged after message {i} `{msg}`");
        }
    }
    let mut again = Session::new();
    for m in &accepted {
        let r = again.handle_line(m);
        ensure!(r.get("error").is_none(), "accepted message rejected on replay: {m}: {r}");
    }
    ensure!(again.tree() == s.tree() && again.actions() == s.actions(), "replayed session differs");
    Ok(format!("10000 messages ({errors} rejected) stayed in sync; slowest reply {slowest:.1} ms"))
}

/// Criteria run one at a time so the timing checks do not compete for CPU.
static SERIAL: Mutex<()> = Mutex::new(());

fn criterion(name: &str, f: fn() -> Outcome) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    match f() {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => panic!("FAIL {name}: {detail}"),
    }
}

#[test]
fn criterion_1_oracle_equivalence() {
    criterion("oracle-equivalence", oracle_equivalence);
}

#[test]
fn criterion_2_golden_lowering() {
    criterion("golden-lowering", golden_lowering);
}

#[test]
fn criterion_3_no_spill_and_unroll() {
    criterion("no-spill-and-unroll", no_spill_and_unroll);
}

#[test]
fn criterion_4_compile_speed() {
    criterion("compile-speed", compile_speed);
}

#[test]
fn criterion_5_tuner_efficacy() {
    criterion("tuner-efficacy", tuner_efficacy);
}

#[test]
fn criterion_6_analytics() {
    criterion("analytics", analytics);
}

#[test]
fn criterion_7_protocol() {
    criterion("protocol", protocol_fuzz);
}
