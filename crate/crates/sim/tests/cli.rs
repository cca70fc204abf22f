//! End-to-end tests of the `lasp` binary: exit-code contract, report files,
//! determinism of artifacts, and the tamper self-test hook.

use std::path::Path;
use std::process::{Command, Output};

use lasp_core::matrix::relative_max_error;
use lasp_sim::fixtures;

fn lasp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lasp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn lasp_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lasp"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn verify_small_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("report");
    let out = lasp(&[
        "verify", "--n", "64", "--d", "16", "--heads", "2", "--world", "4", "--sp-size", "4",
        "--seed", "7", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("oracle/dense_vs_serial"));
    assert!(text.contains("verify: pass"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("verify.json")).unwrap())
            .unwrap();
    assert_eq!(report["pass"], serde_json::json!(true));
    assert!(report["properties"].as_array().unwrap().len() >= 8);
}

#[test]
fn verify_default_config_passes() {
    let out = lasp(&["verify"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("verify: pass"));
}

#[test]
fn verify_rejects_bad_partition_with_usage_exit() {
    let out = lasp(&["verify", "--sp-size", "3", "--world", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("does not divide"));
}

#[test]
fn verify_tamper_hook_turns_the_suite_red() {
    let out = lasp_env(
        &[
            "verify", "--n", "64", "--d", "16", "--heads", "2", "--world", "4", "--sp-size", "4",
        ],
        "LASP_VERIFY_TAMPER",
        "1",
    );
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("chunk/forward_invariance"));
    assert!(text.contains("FAIL"));
}

#[test]
fn gradcheck_passes_and_enforces_cap() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("report");
    let out = lasp(&[
        "gradcheck", "--n", "32", "--d", "8", "--heads", "2", "--world", "4", "--sp-size", "4",
        "--lambda", "0.9", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("gradcheck threshold"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("gradcheck.json")).unwrap())
            .unwrap();
    assert_eq!(report["pass"], serde_json::json!(true));
    // Step sweep includes both defaults and the lambda = 1 edge.
    let cases = report["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 4);

    let too_big = lasp(&["gradcheck", "--n", "256"]);
    assert_eq!(too_big.status.code(), Some(2));
}

fn run_simulate(dir: &Path, mode: &str, seed: &str) {
    let out = lasp(&[
        "simulate", "--n", "32", "--d", "8", "--heads", "2", "--world", "8", "--sp-size", "4",
        "--batch", "2", "--seed", seed, "--mode", mode, "--out", dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
}

#[test]
fn simulate_is_deterministic_and_places_batches_like_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    run_simulate(&first, "lockstep", "42");
    run_simulate(&second, "lockstep", "42");

    let trace_a = std::fs::read(first.join("trace.jsonl")).unwrap();
    let trace_b = std::fs::read(second.join("trace.jsonl")).unwrap();
    assert!(!trace_a.is_empty());
    assert_eq!(trace_a, trace_b, "same seed must give byte-identical traces");
    assert_eq!(
        std::fs::read(first.join("summary.json")).unwrap(),
        std::fs::read(second.join("summary.json")).unwrap()
    );

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(first.join("summary.json")).unwrap())
            .unwrap();
    let placements = summary["placements"].as_array().unwrap();
    assert_eq!(placements[0]["ranks"], serde_json::json!([0, 1, 2, 3]));
    assert_eq!(placements[1]["ranks"], serde_json::json!([4, 5, 6, 7]));
    assert_eq!(placements[1]["src_rank"], serde_json::json!(4));
    // G = 2: averaged gradients exist for the one full round.
    assert!(first.join("mean_dq_r0_l0.laspt1").exists());
}

#[test]
fn simulate_modes_agree_numerically() {
    let dir = tempfile::tempdir().unwrap();
    let lockstep = dir.path().join("lockstep");
    let concurrent = dir.path().join("concurrent");
    run_simulate(&lockstep, "lockstep", "7");
    run_simulate(&concurrent, "concurrent", "7");
    for name in ["output_b0_l0.laspt1", "dq_b1_l0.laspt1"] {
        let a = fixtures::read_matrix(&lockstep.join(name)).unwrap();
        let b = fixtures::read_matrix(&concurrent.join(name)).unwrap();
        assert!(relative_max_error(&a, &b).unwrap() <= 1e-12, "{name}");
    }
}

#[test]
fn comm_report_crossover_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("report");
    let out = lasp(&[
        "comm-report", "--n", "65536", "--d", "2048", "--heads", "16", "--sp-size", "64",
        "--batch", "1", "--world", "64", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("LASP"));
    assert!(text.contains("262144"));
    assert!(text.contains("strictly lowest"));

    let csv = std::fs::read_to_string(out_dir.join("comm_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.contains("LASP,262144,128"));
    assert!(csv.contains("DeepSpeed-Ulysses,8388608,4096"));

    // N/T = 16 at d/h = 128: LASP is beaten.
    let low = lasp(&[
        "comm-report", "--n", "16384", "--d", "2048", "--heads", "16", "--sp-size", "1024",
        "--world", "1024", "--batch", "1",
    ]);
    assert_eq!(low.status.code(), Some(0));
    assert!(stdout(&low).contains("does not have the lowest"));

    let bogus = lasp(&["comm-report", "--method", "allgatherhero"]);
    assert_eq!(bogus.status.code(), Some(2));
}

#[test]
fn comm_report_measures_simulated_trace() {
    let dir = tempfile::tempdir().unwrap();
    let sim_dir = dir.path().join("sim");
    run_simulate(&sim_dir, "lockstep", "11");
    let trace = sim_dir.join("trace.jsonl");
    let out = lasp(&[
        "comm-report", "--n", "32", "--d", "8", "--heads", "2", "--sp-size", "4", "--world", "8",
        "--batch", "2", "--trace", trace.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    // 2 groups x 2 heads x (T-1) = 12 messages per direction, 16 elements each.
    assert!(text.contains("12 fwd + 12 bwd messages of 16 elements"), "{text}");
}

#[test]
fn bench_requires_sweep_and_writes_csv() {
    let empty = lasp(&["bench"]);
    assert_eq!(empty.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("bench");
    let out = lasp(&[
        "bench", "--sweep", "64,128", "--d", "8", "--heads", "2", "--world", "4", "--sp-size",
        "4", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("n,sp_size,chunk_size,"));

    let ragged = lasp(&["bench", "--sweep", "63", "--sp-size", "4"]);
    assert_eq!(ragged.status.code(), Some(2));
}

#[test]
fn simulate_accepts_fixture_tensors_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = lasp_core::rng::SplitMix64::new(5150);
    let (n, d) = (16usize, 4usize);
    let q = rng.matrix(n, d);
    let k = rng.matrix(n, d);
    let v = rng.matrix(n, d);
    let dout = rng.matrix(n, d);
    for (name, m) in [("q", &q), ("k", &k), ("v", &v), ("dout", &dout)] {
        fixtures::write_matrix(&dir.path().join(format!("{name}.laspt1")), m).unwrap();
    }
    let cfg_path = dir.path().join("cfg.json");
    let cfg = serde_json::json!({
        "n": n, "d": d, "heads": 2, "world": 4, "sp_size": 4, "batch": 1, "layers": 1,
        "lambda": 0.9, "seed": 1,
        "fixtures": {
            "q": dir.path().join("q.laspt1"),
            "k": dir.path().join("k.laspt1"),
            "v": dir.path().join("v.laspt1"),
            "dout": dir.path().join("dout.laspt1"),
        }
    });
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();

    let out_dir = dir.path().join("run");
    let out = lasp(&[
        "simulate", "--config", cfg_path.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    // The run must consume exactly the fixture tensors: rebuild the expected
    // output from the serial oracle per head.
    let got = fixtures::read_matrix(&out_dir.join("output_b0_l0.laspt1")).unwrap();
    let q_heads = lasp_core::matrix::split_cols(&q, 2).unwrap();
    let k_heads = lasp_core::matrix::split_cols(&k, 2).unwrap();
    let v_heads = lasp_core::matrix::split_cols(&v, 2).unwrap();
    let per_head: Vec<_> = (0..2)
        .map(|h| {
            let p = lasp_core::oracle::AttnProblem::new(
                q_heads[h].clone(),
                k_heads[h].clone(),
                v_heads[h].clone(),
                0.9,
            )
            .unwrap();
            lasp_core::oracle::serial_forward(&p).unwrap()
        })
        .collect();
    let want = lasp_core::matrix::concat_cols(&per_head).unwrap();
    assert!(relative_max_error(&got, &want).unwrap() <= 1e-10);

    // Mismatched shape fails with a usage error.
    let bad = serde_json::json!({
        "n": 32, "d": d, "heads": 2, "world": 4, "sp_size": 4,
        "fixtures": {
            "q": dir.path().join("q.laspt1"),
            "k": dir.path().join("k.laspt1"),
            "v": dir.path().join("v.laspt1"),
        }
    });
    std::fs::write(&cfg_path, serde_json::to_string(&bad).unwrap()).unwrap();
    let out = lasp(&["simulate", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn models_registry_export() {
    let out = lasp(&["models"]);
    assert_eq!(out.status.code(), Some(0));
    let listing: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let entries = listing.as_array().unwrap();
    assert_eq!(entries.len(), 13);
    let retnet = entries
        .iter()
        .find(|e| e["name"] == "tnl_retnet")
        .unwrap();
    assert_eq!(retnet["executable"], serde_json::json!(true));
    assert_eq!(retnet["oscillation_kind"], serde_json::json!("scalar"));
    assert_eq!(retnet["k"], serde_json::json!("k"));
    let executable = entries
        .iter()
        .filter(|e| e["executable"] == serde_json::json!(true))
        .count();
    assert_eq!(executable, 3);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"n": 64, "d": 16, "heads": 2, "world": 2, "sp_size": 2, "lambda": 0.9, "seed": 5}"#,
    )
    .unwrap();
    let out = lasp(&[
        "verify", "--config", cfg_path.to_str().unwrap(), "--n", "32",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let bad = lasp(&["verify", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(bad.status.code(), Some(2));
}
