use std::path::Path;
use std::process::{Command, Output};

fn bench(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alora-bench"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

const SMALL: [&str; 6] = ["--prompt-len", "24", "--gen-len", "8", "--adapter-gen-len", "4"];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

#[test]
fn sync_writes_metrics_aggregates_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench(
        &with_small(&["sync", "--pipeline", "base-adapter-base", "--virtual-clock", "--check", "--trace"]),
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.starts_with("request_id,mode,pipeline,stage,"));
    assert!(dir.path().join("metrics_aggregate.csv").exists());
    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["step"].as_u64().unwrap() >= 1);
    }
}

#[test]
fn json_format_and_lora_mode() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench(
        &with_small(&["sync", "--mode", "lora", "--format", "json", "--check", "--instances", "2"]),
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r["mode"] == "lora"));
    assert!(rows.iter().all(|r| r["hit_tokens"] == 0));
}

#[test]
fn async_and_compare_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench(
        &with_small(&["async", "--virtual-clock", "--arrival-rate", "100", "--n-requests", "5", "--check"]),
        &dir.path().join("async"),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = bench(
        &with_small(&["compare", "--virtual-clock", "--values", "16,32", "--reps", "2"]),
        &dir.path().join("cmp"),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let speedups = std::fs::read_to_string(dir.path().join("cmp/speedups.csv")).unwrap();
    assert_eq!(speedups.lines().count(), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("prefill"));

    let out = bench(
        &with_small(&["sweep", "--virtual-clock", "--param", "gen-len", "--values", "4,8"]),
        &dir.path().join("sweep"),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("sweep/sweep_summary.csv").exists());
}

#[test]
fn bad_input_exits_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench(&["sync", "--pipeline", "nonsense"], dir.path());
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());

    let out = bench(&with_small(&["sync", "--n-adapters", "0"]), dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_adapters"));

    let out = bench(&with_small(&["async", "--arrival-rate", "0"]), dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_sets_engine_knobs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("engine.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"n_layers": 1, "n_heads": 2, "head_dim": 8, "d_model": 16, "vocab_size": 64,
            "max_seq_len": 512, "rng_seed": 1}, "pool_blocks": 64, "block_size": 2}"#,
    )
    .unwrap();
    let out = bench(
        &with_small(&["sync", "--virtual-clock", "--check", "--config", cfg.to_str().unwrap()]),
        &dir.path().join("o"),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    // Block size 2: the adapter call reuses all 24 + 8 - 1 committed positions rounded down.
    assert!(stdout.contains("hits     30"), "{stdout}");
}
