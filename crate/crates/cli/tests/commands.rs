use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn moesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moesim")).args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("moesim-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn memory_reports_saving_ratio() {
    let v = json(&moesim(&["memory", "--preset", "moe-gpt3-s", "--batch", "16384", "--n", "8", "--reuse"]));
    assert!((v["saving_ratio"].as_f64().unwrap() - 0.5709).abs() < 1e-4);
    assert_eq!(v["reusing"]["total_bytes"], 2 * v["reusing"]["total"].as_u64().unwrap());
    assert_eq!(v["measured"]["reusing"]["total"], v["reusing"]["total"]);
}

#[test]
fn pipelining_shortens_a_comm_bound_step() {
    let makespan = |n: &str| {
        json(&moesim(&["simulate", "--preset", "moe-gpt3-s", "--batch", "16384", "--n", n]))["makespan_us"]
            .as_u64()
            .unwrap()
    };
    assert!(makespan("4") < makespan("1"));
}

#[test]
fn simulate_writes_both_trace_formats() {
    let jsonl = scratch("trace.jsonl");
    let v = json(&moesim(&["simulate", "--n", "2", "--out", jsonl.to_str().unwrap()]));
    let text = std::fs::read_to_string(&jsonl).unwrap();
    assert_eq!(text.lines().count() as u64, v["ops"].as_u64().unwrap());
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["start_us"], 0);

    let chrome = scratch("trace.json");
    moesim(&["simulate", "--n", "2", "--out", chrome.to_str().unwrap(), "--trace-format", "trace-event"]);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&chrome).unwrap()).unwrap();
    let events = doc["traceEvents"].as_array().unwrap();
    assert_eq!(events.iter().filter(|e| e["ph"] == "M").count(), 3);
    assert_eq!(events.len() as u64, 3 + v["ops"].as_u64().unwrap());
}

#[test]
fn adaptive_simulation_runs_the_tuner() {
    let v = json(&moesim(&["simulate", "--n", "adaptive", "--strategy", "S4", "--batch", "8192"]));
    assert_ne!(v["partitions"], 1);
    assert_eq!(v["strategy"], "S4");
}

#[test]
fn sweep_is_reproducible_with_stable_columns() {
    let args = ["sweep", "--ns", "1,2,4,8", "--batches", "4096,8192,16384,32768", "--strategies", "none,S2"];
    let a = moesim(&args);
    let b = moesim(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "tokens,partitions,strategy,status,makespan_us,compute_busy_us,collective_busy_us,copy_busy_us,\
         activations,buffers,total_elements,total_bytes"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 32);
    assert!(rows[0].starts_with("4096,1,none,ok,"));
}

#[test]
fn search_emits_iterations_and_summary() {
    let out = moesim(&["search", "--iterations", "40", "--seed", "3", "--strategy", "none"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 41);
    for (i, line) in lines[..40].iter().enumerate() {
        assert_eq!(line["iter"], i);
        for key in ["B", "n", "trials_run", "makespan"] {
            assert!(line[key].is_u64(), "{key} in {line}");
        }
    }
    let summary = &lines[40]["summary"];
    let trials: u64 = lines[..40].iter().map(|l| l["trials_run"].as_u64().unwrap()).sum();
    assert_eq!(summary["total_trials"], trials);
    assert!(summary["cache_hit_rate"].as_f64().unwrap() >= 0.0);
}

#[test]
fn config_file_with_flag_overrides() {
    let path = scratch("exp.json");
    std::fs::write(
        &path,
        r#"{"model": {"preset": "moe-bert-l"}, "batch": {"tokens": 4096}, "pipeline": 2, "strategy": "S3"}"#,
    )
    .unwrap();
    let v = json(&moesim(&["plan", "--config", path.to_str().unwrap()]));
    assert_eq!((v["tokens"].as_u64(), v["micro_batch"].as_u64()), (Some(4096), Some(2048)));
    let v = json(&moesim(&["simulate", "--config", path.to_str().unwrap(), "--batch", "8192", "--n", "4"]));
    assert_eq!((v["tokens"].as_u64(), v["partitions"].as_u64()), (Some(8192), Some(4)));
    assert_eq!(v["strategy"], "S3");
}

#[test]
fn errors_are_json_on_stderr() {
    let unknown = moesim(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&unknown.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "usage");

    let conflict = moesim(&["memory", "--reuse", "--strategy", "none"]);
    assert_eq!(conflict.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&conflict.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "conflict");

    let unwritable = moesim(&["plan", "--out", "/nonexistent-dir/plan.json"]);
    assert_eq!(unwritable.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&unwritable.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");

    let path = scratch("bad.json");
    std::fs::write(&path, "{\n  \"hardware\": {\"w_comp\": -1, \"w_comm\": 1, \"w_mem\": 1}\n}").unwrap();
    let invalid = moesim(&["plan", "--config", path.to_str().unwrap()]);
    let err: Value = serde_json::from_slice(&invalid.stderr).unwrap();
    assert_eq!(err["error"]["path"], "hardware.w_comp");

    std::fs::write(&path, "{\n  \"hardware\": {\"w_comp\": 1,\n  \"bogus\": 2}\n}").unwrap();
    let parse = moesim(&["plan", "--config", path.to_str().unwrap()]);
    let err: Value = serde_json::from_slice(&parse.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "parse");
    assert_eq!(err["error"]["line"], 3);
}
