use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use looptree::bench::{benchmark, compile_timed, quick_stats, TimedEvaluator};
use looptree::core::backend::TargetDescriptor;
use looptree::core::ir::Dfg;
use looptree::core::models;
use looptree::core::schedule::replay;
use looptree::core::tuner::{StaticEvaluator, Tuner};
use looptree::{data, format, session};
use serde_json::json;

#[derive(Parser)]
#[command(name = "looptree", version, about = "Schedule, compile and run tensor contractions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    Asm,
    Json,
    Tree,
}

#[derive(clap::Args)]
struct Machine {
    /// avx2, avx512 or neon.
    #[arg(long, default_value = "avx512")]
    target: String,
    /// Instruction budget per unrolled region.
    #[arg(long)]
    unroll: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a graph and print its kernel.
    Compile {
        dfg: PathBuf,
        #[command(flatten)]
        machine: Machine,
        #[arg(long, value_enum, default_value = "asm")]
        emit: Emit,
    },
    /// Execute a graph on tensors from a data directory and write the outputs there.
    Run {
        dfg: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        machine: Machine,
    },
    /// Time a graph and print its stats as JSON.
    Bench {
        dfg: PathBuf,
        #[command(flatten)]
        machine: Machine,
        #[arg(long, default_value_t = 200)]
        min_ms: u64,
    },
    /// Search schedules; one leaderboard line per candidate.
    Tune {
        dfg: PathBuf,
        #[arg(long, default_value_t = 500)]
        budget: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the best scheduled graph here.
        #[arg(long)]
        best: Option<PathBuf>,
        /// Time every candidate (tie-break on measured speed).
        #[arg(long)]
        timed: bool,
        #[command(flatten)]
        machine: Machine,
    },
    /// Session protocol on stdin/stdout.
    Serve,
    /// Feed recorded protocol messages to a session on `dfg`, print the final state.
    Replay { dfg: PathBuf, log: PathBuf },
    /// Print a built-in graph as JSON.
    Example { name: String },
}

enum Failure {
    Input(String),
    Other(String),
}

type Res = Result<(), Failure>;

fn input<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Input(e.to_string())
}

fn other<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Other(e.to_string())
}

fn load(path: &Path) -> Result<Dfg, Failure> {
    let text = fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    format::from_json(&text).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn target(m: &Machine) -> Result<TargetDescriptor, Failure> {
    if m.unroll == Some(0) {
        return Err(input("--unroll must be positive"));
    }
    TargetDescriptor::by_name(&m.target).map_err(input)
}

/// Write to stdout; a closed pipe (`| head`) is not an error.
fn out(text: &str) -> Res {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(other(e)),
        _ => Ok(()),
    }
}

fn print_json(v: &serde_json::Value) -> Res {
    out(&(serde_json::to_string_pretty(v).expect("json") + "\n"))
}

fn run(cli: Cli) -> Res {
    match cli.cmd {
        Cmd::Compile { dfg, machine, emit } => {
            let d = load(&dfg)?;
            let t = target(&machine)?;
            let k = compile_timed(&d, &t, machine.unroll).map_err(other)?;
            match emit {
                Emit::Asm => out(&k.program.disassemble())?,
                Emit::Tree => out(&looptree::core::lower::lower(&d).map_err(other)?.render())?,
                Emit::Json => print_json(&json!({
                    "compile_ms": k.compile_time.as_secs_f64() * 1e3,
                    "counters": k.program.static_counters(),
                    "program": k.program,
                }))?,
            }
        }
        Cmd::Run { dfg, data: dir, machine } => {
            let d = load(&dfg)?;
            let t = target(&machine)?;
            let (_, mut bufs) = data::read_dir(&dir).map_err(input)?;
            let mut k = compile_timed(&d, &t, machine.unroll).map_err(other)?;
            k.execute(&mut bufs).map_err(input)?;
            let shapes: BTreeMap<usize, Vec<usize>> =
                k.outputs.iter().map(|(s, i)| (*s, i.dims.iter().map(|d| d.1).collect())).collect();
            let outs = bufs.into_iter().filter(|(s, _)| k.outputs.contains_key(s)).collect();
            data::write_dir(&dir, &shapes, &outs).map_err(other)?;
            print_json(&json!({"outputs": shapes.keys().collect::<Vec<_>>(), "counters": k.counters}))?;
        }
        Cmd::Bench { dfg, machine, min_ms } => {
            let d = load(&dfg)?;
            let t = target(&machine)?;
            let s = benchmark(&d, &t, machine.unroll, Duration::from_millis(min_ms)).map_err(other)?;
            print_json(&serde_json::to_value(s).expect("stats"))?;
        }
        Cmd::Tune { dfg, budget, out, best, timed, machine } => {
            let d = load(&dfg)?;
            let t = target(&machine)?;
            let result = if timed {
                let eval = TimedEvaluator { unroll: machine.unroll, min_time: Duration::from_millis(2) };
                Tuner::new(&d, &t, budget, eval).run()
            } else {
                Tuner::new(&d, &t, budget, StaticEvaluator { unroll_limit: machine.unroll }).run()
            };
            if let Some(p) = out {
                let f = fs::File::create(&p).map_err(|e| input(format!("{}: {e}", p.display())))?;
                let mut w = BufWriter::new(f);
                for c in &result.leaderboard {
                    serde_json::to_writer(&mut w, c).map_err(other)?;
                    writeln!(w).map_err(other)?;
                }
                w.flush().map_err(other)?;
            }
            let scheduled = replay(&d, &result.best).map_err(other)?;
            if let Some(p) = best {
                fs::write(&p, format::to_json(&scheduled)).map_err(|e| input(format!("{}: {e}", p.display())))?;
            }
            let stats = quick_stats(&scheduled, &t, machine.unroll).map_err(other)?;
            print_json(&json!({"candidates": result.leaderboard.len(), "best": result.best, "stats": stats}))?;
        }
        Cmd::Serve => {
            let stdin = io::stdin();
            session::serve(stdin.lock(), io::stdout().lock()).map_err(other)?;
        }
        Cmd::Replay { dfg, log } => {
            let d = load(&dfg)?;
            let text = fs::read_to_string(&log).map_err(|e| input(format!("{}: {e}", log.display())))?;
            let mut s = session::Session::with_dfg(d);
            let mut rejected = 0;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                if s.handle_line(line).get("error").is_some() {
                    rejected += 1;
                }
            }
            let mut r = s.handle(json!({"cmd": "show_tree"}));
            r["rejected"] = json!(rejected);
            r["actions"] = json!(s.actions());
            print_json(&r)?;
        }
        Cmd::Example { name } => {
            let d = models::by_name(&name)
                .ok_or_else(|| input(format!("unknown model `{name}`; try one of {:?} or mmN", models::NAMES)))?;
            out(&(format::to_json(&d) + "\n"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
