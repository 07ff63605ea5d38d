//! Line-delimited JSON session protocol.
//!
//! On start the server writes `{"hello":"looptree","protocol":1}`. Each
//! request is one JSON object with a `cmd` field; each reply is one line.
//! An optional `id` is echoed back.
//!
//! | cmd          | fields                                   | mutates |
//! |--------------|------------------------------------------|---------|
//! | `load`       | one of `dfg` (object), `model`, `path`   | yes     |
//! | `split`      | `var`, `factor`                          | yes     |
//! | `reorder`    | `order`, optional `nodes`                | yes     |
//! | `stage`      | `node`, `var`                            | yes     |
//! | `unstage`    | `node`, `var`                            | yes     |
//! | `undo`       |                                          | yes     |
//! | `set_target` | `target` (`avx2`, `avx512`, `neon`)      | yes     |
//! | `set_unroll` | `limit` (positive integer or null)       | yes     |
//! | `tune_step`  | optional `budget` (default 500)          | yes     |
//! | `bench`      | optional `min_ms` (default 100)          | no      |
//! | `show_tree`  |                                          | no      |
//! | `show_kernel`|                                          | no      |
//! | `show_dfg`   |                                          | no      |
//! | `actions`    |                                          | no      |
//!
//! Mutating replies carry `tree` (the loop tree rendering) and `stats`.
//! Errors reply `{"error": code, "detail": text}` and leave the session as it
//! was. Without `nodes`, `reorder` applies to every node whose loops are a
//! permutation of `order`.

use std::io::{self, BufRead, Write};
use std::path::Path;
use std::time::Duration;

use looptree_core::backend::TargetDescriptor;
use looptree_core::feedback::ScheduleStats;
use looptree_core::ir::{Dfg, NodeId};
use looptree_core::lower::lower;
use looptree_core::models;
use looptree_core::schedule::{replay, Action};
use looptree_core::tuner::{StaticEvaluator, Tuner};
use looptree_core::Error;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::bench::{benchmark, compile_timed, quick_stats};
use crate::format::{self, DfgJson, FormatError};

pub const PROTOCOL: u32 = 1;

pub fn hello() -> Value {
    json!({"hello": "looptree", "protocol": PROTOCOL})
}

#[derive(Debug, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
enum Request {
    Load {
        dfg: Option<Value>,
        model: Option<String>,
        path: Option<String>,
    },
    Split {
        var: String,
        factor: usize,
    },
    Reorder {
        order: Vec<String>,
        nodes: Option<Vec<u32>>,
    },
    Stage {
        node: u32,
        var: String,
    },
    Unstage {
        node: u32,
        var: String,
    },
    Undo,
    SetTarget {
        target: String,
    },
    SetUnroll {
        limit: Option<usize>,
    },
    TuneStep {
        budget: Option<usize>,
    },
    Bench {
        min_ms: Option<u64>,
    },
    ShowTree,
    ShowKernel,
    ShowDfg,
    Actions,
}

const COMMANDS: [&str; 15] = [
    "load",
    "split",
    "reorder",
    "stage",
    "unstage",
    "undo",
    "set_target",
    "set_unroll",
    "tune_step",
    "bench",
    "show_tree",
    "show_kernel",
    "show_dfg",
    "actions",
    "hello",
];

/// A protocol error: machine-readable code plus human detail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fault {
    pub code: &'static str,
    pub detail: String,
}

impl Fault {
    fn new(code: &'static str, detail: impl Into<String>) -> Self {
        Fault { code, detail: detail.into() }
    }
}

impl From<Error> for Fault {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::UnknownVar(_) | Error::UnknownVarName(_) => "unknown-var",
            Error::AmbiguousVarName(_) => "ambiguous-var",
            Error::UnknownNode(_) => "unknown-node",
            Error::NotAPermutation(_) => "not-a-permutation",
            Error::ZeroFactor => "bad-factor",
            Error::ZeroUnroll => "bad-unroll",
            Error::NotInOrder { .. } => "not-in-order",
            _ => "invalid",
        };
        Fault::new(code, e.to_string())
    }
}

impl From<FormatError> for Fault {
    fn from(e: FormatError) -> Self {
        Fault::new("bad-dfg", e.to_string())
    }
}

#[derive(Clone, Debug)]
struct Entry {
    actions: Vec<Action>,
    tuned: bool,
}

struct Tuning {
    tuner: Tuner<StaticEvaluator>,
    /// History length when the search started.
    depth: usize,
}

pub struct Session {
    initial: Option<Dfg>,
    current: Option<Dfg>,
    history: Vec<Entry>,
    target: TargetDescriptor,
    unroll: Option<usize>,
    tuning: Option<Tuning>,
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Session {
    pub fn new() -> Self {
        Session {
            initial: None,
            current: None,
            history: Vec::new(),
            target: TargetDescriptor::avx512(),
            unroll: None,
            tuning: None,
        }
    }

    pub fn with_dfg(dfg: Dfg) -> Self {
        let mut s = Self::new();
        s.initial = Some(dfg.clone());
        s.current = Some(dfg);
        s
    }

    pub fn initial(&self) -> Option<&Dfg> {
        self.initial.as_ref()
    }

    pub fn current(&self) -> Option<&Dfg> {
        self.current.as_ref()
    }

    /// Every accepted, not undone schedule action in order.
    pub fn actions(&self) -> Vec<Action> {
        self.history.iter().flat_map(|e| e.actions.iter().cloned()).collect()
    }

    pub fn target(&self) -> &TargetDescriptor {
        &self.target
    }

    /// Current loop tree rendering.
    pub fn tree(&self) -> Option<String> {
        self.current.as_ref().and_then(|d| lower(d).ok()).map(|t| t.render())
    }

    /// Handle one raw line; always returns exactly one reply.
    pub fn handle_line(&mut self, line: &str) -> Value {
        match serde_json::from_str::<Value>(line) {
            Ok(v) => self.handle(v),
            Err(e) => error_reply(&Fault::new("bad-json", e.to_string())),
        }
    }

    pub fn handle(&mut self, msg: Value) -> Value {
        let id = msg.get("id").cloned();
        let mut msg = msg;
        if let Some(o) = msg.as_object_mut() {
            o.remove("id");
        }
        let reply = self.dispatch(msg);
        let mut v = match reply {
            Ok(v) => v,
            Err(f) => error_reply(&f),
        };
        if let (Some(id), Some(o)) = (id, v.as_object_mut()) {
            o.insert("id".into(), id);
        }
        v
    }

    fn dispatch(&mut self, msg: Value) -> Result<Value, Fault> {
        let cmd = msg
            .get("cmd")
            .and_then(Value::as_str)
            .ok_or_else(|| Fault::new("bad-message", "missing string field `cmd`"))?
            .to_string();
        if !COMMANDS.contains(&cmd.as_str()) {
            return Err(Fault::new("unknown-cmd", format!("unknown command `{cmd}`")));
        }
        if cmd == "hello" {
            return Ok(hello());
        }
        let req: Request = serde_json::from_value(msg).map_err(|e| Fault::new("bad-message", e.to_string()))?;
        match req {
            Request::Load { dfg, model, path } => self.load(dfg, model, path),
            Request::Split { var, factor } => self.act("split", vec![Action::Split { var, factor }]),
            Request::Reorder { order, nodes } => {
                let nodes = match nodes {
                    Some(n) => n.into_iter().map(NodeId).collect(),
                    None => self.nodes_for(&order)?,
                };
                self.act("reorder", vec![Action::Reorder { nodes, order }])
            }
            Request::Stage { node, var } => self.act("stage", vec![Action::Stage { node: NodeId(node), var }]),
            Request::Unstage { node, var } => self.act("unstage", vec![Action::Unstage { node: NodeId(node), var }]),
            Request::Undo => self.undo(),
            Request::SetTarget { target } => {
                let t = TargetDescriptor::by_name(&target).map_err(|e| Fault::new("unknown-target", e.to_string()))?;
                self.with_settings(t, self.unroll)
            }
            Request::SetUnroll { limit } => {
                if limit == Some(0) {
                    return Err(Error::ZeroUnroll.into());
                }
                self.with_settings(self.target.clone(), limit)
            }
            Request::TuneStep { budget } => self.tune_step(budget.unwrap_or(500)),
            Request::Bench { min_ms } => {
                let d = self.dfg()?;
                let s = benchmark(d, &self.target, self.unroll, Duration::from_millis(min_ms.unwrap_or(100)))?;
                Ok(json!({"ok": true, "cmd": "bench", "stats": s}))
            }
            Request::ShowTree => {
                let d = self.dfg()?.clone();
                self.state_reply("show_tree", &d)
            }
            Request::ShowKernel => {
                let k = compile_timed(self.dfg()?, &self.target, self.unroll)?;
                Ok(json!({"ok": true, "cmd": "show_kernel", "kernel": k.program.disassemble()}))
            }
            Request::ShowDfg => Ok(json!({"ok": true, "cmd": "show_dfg", "dfg": DfgJson::from_dfg(self.dfg()?)})),
            Request::Actions => Ok(json!({"ok": true, "cmd": "actions", "actions": self.actions()})),
        }
    }

    fn dfg(&self) -> Result<&Dfg, Fault> {
        self.current.as_ref().ok_or_else(|| Fault::new("no-dfg", "load a graph first"))
    }

    fn stats(&self, d: &Dfg) -> Result<ScheduleStats, Fault> {
        quick_stats(d, &self.target, self.unroll).map_err(|e| Fault::new("compile-failed", e.to_string()))
    }

    fn state_reply(&self, cmd: &str, d: &Dfg) -> Result<Value, Fault> {
        let tree = lower(d)?.render();
        let stats = self.stats(d)?;
        Ok(json!({"ok": true, "cmd": cmd, "tree": tree, "stats": stats, "depth": self.history.len()}))
    }

    fn load(&mut self, dfg: Option<Value>, model: Option<String>, path: Option<String>) -> Result<Value, Fault> {
        let d = match (dfg, model, path) {
            (Some(v), None, None) => format::from_value(v)?,
            (None, Some(m), None) => {
                models::by_name(&m).ok_or_else(|| Fault::new("unknown-model", format!("no model named `{m}`")))?
            }
            (None, None, Some(p)) => {
                let text = std::fs::read_to_string(Path::new(&p)).map_err(|e| Fault::new("io", format!("{p}: {e}")))?;
                format::from_json(&text)?
            }
            _ => return Err(Fault::new("bad-message", "load takes exactly one of `dfg`, `model`, `path`")),
        };
        let reply = self.state_reply("load", &d)?;
        *self = Session { target: self.target.clone(), unroll: self.unroll, ..Session::with_dfg(d) };
        Ok(reply)
    }

    /// Reorder targets: nodes whose loop variables are exactly `order`.
    fn nodes_for(&self, order: &[String]) -> Result<Vec<NodeId>, Fault> {
        let d = self.dfg()?;
        let mut want = Vec::with_capacity(order.len());
        for n in order {
            want.push(d.var_by_name(n)?);
        }
        let mut want_sorted = want.clone();
        want_sorted.sort();
        let nodes: Vec<NodeId> = d
            .nodes()
            .filter(|n| {
                let mut o = n.order.clone();
                o.sort();
                o == want_sorted
            })
            .map(|n| n.id)
            .collect();
        if nodes.is_empty() || want_sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Fault::new("not-a-permutation", "no node iterates exactly these loops"));
        }
        Ok(nodes)
    }

    fn act(&mut self, cmd: &str, actions: Vec<Action>) -> Result<Value, Fault> {
        let mut d = self.dfg()?.clone();
        for a in &actions {
            a.apply(&mut d)?;
        }
        let mut reply = self.state_reply(cmd, &d)?;
        self.history.push(Entry { actions, tuned: false });
        self.current = Some(d);
        reply["depth"] = json!(self.history.len());
        Ok(reply)
    }

    fn undo(&mut self) -> Result<Value, Fault> {
        let initial = self.initial.as_ref().ok_or_else(|| Fault::new("no-dfg", "load a graph first"))?;
        if self.history.is_empty() {
            return Err(Fault::new("nothing-to-undo", "history is empty"));
        }
        let keep = &self.history[..self.history.len() - 1];
        let flat: Vec<Action> = keep.iter().flat_map(|e| e.actions.iter().cloned()).collect();
        let d = replay(initial, &flat)?;
        let mut reply = self.state_reply("undo", &d)?;
        self.history.pop();
        self.current = Some(d);
        reply["depth"] = json!(self.history.len());
        Ok(reply)
    }

    fn with_settings(&mut self, target: TargetDescriptor, unroll: Option<usize>) -> Result<Value, Fault> {
        let old = (std::mem::replace(&mut self.target, target), std::mem::replace(&mut self.unroll, unroll));
        let d = match self.dfg() {
            Ok(d) => d.clone(),
            Err(_) => return Ok(json!({"ok": true, "target": self.target.name, "unroll": self.unroll})),
        };
        match self.state_reply("settings", &d) {
            Ok(mut r) => {
                self.tuning = None;
                r["target"] = json!(self.target.name);
                r["unroll"] = json!(self.unroll);
                Ok(r)
            }
            Err(f) => {
                (self.target, self.unroll) = old;
                Err(f)
            }
        }
    }

    /// Run the next tuner step and adopt the best schedule found so far as
    /// one undoable history entry.
    fn tune_step(&mut self, budget: usize) -> Result<Value, Fault> {
        let depth = self.history.len();
        let resumable = match &self.tuning {
            Some(t) => t.depth == depth || (t.depth + 1 == depth && self.history.last().is_some_and(|e| e.tuned)),
            None => false,
        };
        if !resumable {
            let d = self.dfg()?;
            let tuner = Tuner::new(d, &self.target, budget, StaticEvaluator { unroll_limit: self.unroll });
            self.tuning = Some(Tuning { tuner, depth });
        }
        let t = self.tuning.as_mut().expect("tuning");
        let step = t.tuner.step();
        let base_depth = t.depth;
        let evaluated = t.tuner.leaderboard().len();
        let best = t.tuner.best_actions();
        let done = t.tuner.done();
        let prefix: Vec<Action> = self.history[..base_depth].iter().flat_map(|e| e.actions.iter().cloned()).collect();
        let initial = self.initial.as_ref().expect("loaded");
        let d = replay(initial, &[prefix, best.clone()].concat())?;
        let mut reply = self.state_reply("tune_step", &d)?;
        self.history.truncate(base_depth);
        if !best.is_empty() {
            self.history.push(Entry { actions: best.clone(), tuned: true });
        }
        self.current = Some(d);
        reply["step"] = json!(step);
        reply["done"] = json!(done);
        reply["evaluated"] = json!(evaluated);
        reply["best_actions"] = json!(best);
        reply["depth"] = json!(self.history.len());
        Ok(reply)
    }
}

fn error_reply(f: &Fault) -> Value {
    json!({"error": f.code, "detail": f.detail})
}

/// Serve the protocol until end of input.
pub fn serve(input: impl BufRead, mut output: impl Write) -> io::Result<()> {
    let mut s = Session::new();
    writeln!(output, "{}", hello())?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", s.handle_line(&line))?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm() -> Session {
        let mut s = Session::new();
        let r = s.handle(json!({"cmd": "load", "model": "mm64"}));
        assert_eq!(r["ok"], true, "{r}");
        s
    }

    #[test]
    fn split_reports_new_loops() {
        let mut s = mm();
        let r = s.handle(json!({"cmd": "split", "var": "k", "factor": 4, "id": 7}));
        let tree = r["tree"].as_str().unwrap();
        assert!(tree.contains("k_o") && tree.contains("k_i"), "{tree}");
        assert_eq!(r["stats"]["flops"], 2 * 64 * 64 * 64);
        assert_eq!(r["id"], 7);
        assert_eq!(r["depth"], 1);
    }

    #[test]
    fn undo_restores_rendering() {
        let mut s = mm();
        let before = s.tree().unwrap();
        s.handle(json!({"cmd": "split", "var": "m", "factor": 5}));
        let r = s.handle(json!({"cmd": "undo"}));
        assert_eq!(r["tree"].as_str().unwrap(), before);
        assert_eq!(s.handle(json!({"cmd": "undo"}))["error"], "nothing-to-undo");
    }

    #[test]
    fn bad_reorder_is_rejected_without_change() {
        let mut s = mm();
        let before = s.tree().unwrap();
        let r = s.handle(json!({"cmd": "reorder", "order": ["m"]}));
        assert_eq!(r["error"], "not-a-permutation");
        let r = s.handle(json!({"cmd": "reorder", "order": ["k", "m"], "nodes": [2]}));
        assert_eq!(r["error"], "not-a-permutation", "{r}");
        assert_eq!(s.tree().unwrap(), before);
        assert!(s.actions().is_empty());
    }

    #[test]
    fn error_codes() {
        let mut s = Session::new();
        assert_eq!(s.handle_line("{nope")["error"], "bad-json");
        assert_eq!(s.handle(json!({"cmd": "split", "var": "m", "factor": 2}))["error"], "no-dfg");
        assert_eq!(s.handle(json!({"cmd": "fly"}))["error"], "unknown-cmd");
        assert_eq!(s.handle(json!({"cmd": "load", "model": "nope"}))["error"], "unknown-model");
        let mut s = mm();
        assert_eq!(s.handle(json!({"cmd": "split", "var": "m"}))["error"], "bad-message");
        assert_eq!(s.handle(json!({"cmd": "split", "var": "q", "factor": 2}))["error"], "unknown-var");
        assert_eq!(s.handle(json!({"cmd": "split", "var": "m", "factor": 0}))["error"], "bad-factor");
        assert_eq!(s.handle(json!({"cmd": "set_target", "target": "z80"}))["error"], "unknown-target");
        assert_eq!(s.handle(json!({"cmd": "set_unroll", "limit": 0}))["error"], "bad-unroll");
        assert_eq!(s.handle(json!({"cmd": "stage", "node": 99, "var": "m"}))["error"], "unknown-node");
    }

    #[test]
    fn reorder_by_loop_set_and_stage() {
        let mut s = mm();
        let r = s.handle(json!({"cmd": "reorder", "order": ["k", "m", "n"]}));
        assert_eq!(r["ok"], true, "{r}");
        let r = s.handle(json!({"cmd": "stage", "node": 0, "var": "k"}));
        assert_eq!(r["ok"], true, "{r}");
        assert_eq!(s.actions().len(), 2);
        let replayed = replay(s.initial().unwrap(), &s.actions()).unwrap();
        assert_eq!(&replayed, s.current().unwrap());
    }

    #[test]
    fn tune_steps_are_one_undoable_entry() {
        let mut s = mm();
        s.handle(json!({"cmd": "set_target", "target": "avx2"}));
        let naive = s.handle(json!({"cmd": "show_tree"}))["stats"]["vm_counters"]["loads"].as_u64().unwrap();
        let mut last = None;
        for _ in 0..4 {
            let r = s.handle(json!({"cmd": "tune_step", "budget": 60}));
            assert_eq!(r["ok"], true, "{r}");
            last = Some(r);
        }
        let r = last.unwrap();
        assert!(r["stats"]["vm_counters"]["loads"].as_u64().unwrap() < naive);
        assert_eq!(r["depth"], 1);
        assert_eq!(s.handle(json!({"cmd": "tune_step"}))["done"], true);
        s.handle(json!({"cmd": "undo"}));
        assert!(s.actions().is_empty());
    }

    #[test]
    fn serve_writes_hello_and_one_line_per_request() {
        let input = b"{\"cmd\":\"load\",\"model\":\"relu\"}\n\n{\"cmd\":\"show_kernel\"}\nnot json\n";
        let mut out = Vec::new();
        serve(&input[..], &mut out).unwrap();
        let lines: Vec<Value> =
            String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0]["protocol"], 1);
        assert!(lines[2]["kernel"].as_str().unwrap().contains("vload") || lines[2]["kernel"].is_string());
        assert_eq!(lines[3]["error"], "bad-json");
    }
}
