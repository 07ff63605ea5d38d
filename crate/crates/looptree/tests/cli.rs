use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_looptree"))
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn example(dir: &Path, name: &str) -> std::path::PathBuf {
    let p = dir.join(format!("{name}.json"));
    std::fs::write(&p, ok(bin().args(["example", name]).output().unwrap())).unwrap();
    p
}

#[test]
fn bench_reports_mm512_flops() {
    let dir = tempfile::tempdir().unwrap();
    let p = example(dir.path(), "mm512");
    let v: Value = serde_json::from_str(&ok(bin().arg("bench").arg(&p).args(["--min-ms", "0"]).output().unwrap())).unwrap();
    assert_eq!(v["flops"], 268_435_456u64);
    assert!(v["gflops"].as_f64().unwrap() > 0.0);
}

#[test]
fn compile_emits_disassembly_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let p = example(dir.path(), "mm64");
    let asm = ok(bin().arg("compile").arg(&p).args(["--emit", "asm", "--target", "avx2"]).output().unwrap());
    assert!(asm.contains("loop") && asm.contains("vload"), "{asm}");
    let v: Value = serde_json::from_str(&ok(bin().arg("compile").arg(&p).args(["--emit", "json"]).output().unwrap())).unwrap();
    assert!(v["counters"]["loads"].as_u64().unwrap() > 0);
}

#[test]
fn tune_caps_the_leaderboard() {
    let dir = tempfile::tempdir().unwrap();
    let p = example(dir.path(), "mm64");
    let lb = dir.path().join("lb.jsonl");
    let best = dir.path().join("best.json");
    let out = ok(bin().arg("tune").arg(&p).args(["--budget", "100", "--out"]).arg(&lb).arg("--best").arg(&best).output().unwrap());
    let lines: Vec<Value> = std::fs::read_to_string(&lb).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty() && lines.len() <= 100);
    assert!(lines.iter().all(|c| c["actions"].is_array() && c.get("stats").is_some()));
    let summary: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["candidates"].as_u64().unwrap() as usize, lines.len());
    // the scheduled graph is loadable again
    ok(bin().arg("compile").arg(&best).output().unwrap());
}

#[test]
fn run_round_trips_data_directory() {
    let dir = tempfile::tempdir().unwrap();
    let p = example(dir.path(), "transpose");
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    let input: Vec<f32> = (0..91).map(|i| i as f32).collect();
    std::fs::write(data.join("slot0.f32"), input.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>()).unwrap();
    std::fs::write(data.join("shapes.json"), r#"{"0": {"shape": [7, 13]}}"#).unwrap();
    ok(bin().arg("run").arg(&p).arg("--data").arg(&data).output().unwrap());
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(data.join("shapes.json")).unwrap()).unwrap();
    assert_eq!(manifest["1"]["shape"], serde_json::json!([13, 7]));
    let bytes = std::fs::read(data.join("slot1.f32")).unwrap();
    let out: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    // O[r, c] = I[c, r]
    assert_eq!(out[3 * 7 + 2], input[2 * 13 + 3]);
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{").unwrap();
    for args in [vec!["compile"], vec!["bench"], vec!["tune"]] {
        let out = bin().args(&args).arg(&bad).output().unwrap();
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("malformed JSON"));
    }
    assert_eq!(bin().args(["compile", "missing.json"]).output().unwrap().status.code(), Some(2));
    assert_eq!(bin().args(["example", "nope"]).output().unwrap().status.code(), Some(2));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(2));
}

#[test]
fn serve_speaks_json_lines() {
    let mut child = bin().arg("serve").stdin(Stdio::piped()).stdout(Stdio::piped()).spawn().unwrap();
    let msgs = [
        r#"{"cmd":"load","model":"mm64"}"#,
        r#"{"cmd":"split","var":"k","factor":4}"#,
        r#"{"cmd":"reorder","order":["m"]}"#,
        r#"{"cmd":"undo"}"#,
    ];
    child.stdin.take().unwrap().write_all((msgs.join("\n") + "\n").as_bytes()).unwrap();
    let out = ok(child.wait_with_output().unwrap());
    let lines: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0]["protocol"], 1);
    assert!(lines[2]["tree"].as_str().unwrap().contains("k_i"));
    assert_eq!(lines[3]["error"], "not-a-permutation");
    assert_eq!(lines[4]["tree"], lines[1]["tree"]);
}

#[test]
fn replay_reproduces_session_stats() {
    let dir = tempfile::tempdir().unwrap();
    let p = example(dir.path(), "mm64");
    let log = dir.path().join("log.jsonl");
    std::fs::write(
        &log,
        "{\"cmd\":\"split\",\"var\":\"m\",\"factor\":4}\n{\"cmd\":\"split\",\"var\":\"n\",\"factor\":32}\n\
         {\"cmd\":\"reorder\",\"order\":[\"m_o\",\"n_o\",\"k\",\"m_i\",\"n_i\"]}\n",
    )
    .unwrap();
    let a: Value = serde_json::from_str(&ok(bin().arg("replay").arg(&p).arg(&log).output().unwrap())).unwrap();
    let b: Value = serde_json::from_str(&ok(bin().arg("replay").arg(&p).arg(&log).output().unwrap())).unwrap();
    assert_eq!(a["rejected"], 0);
    assert_eq!(a["actions"].as_array().unwrap().len(), 3);
    assert_eq!(a["stats"]["vm_counters"], b["stats"]["vm_counters"]);
    assert_eq!(a["tree"], b["tree"]);
}
