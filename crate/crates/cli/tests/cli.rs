//! CLI-level behavior: exit codes, report artifacts, config handling, and
//! the external-generation path against a mock server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::Command;

fn genq() -> Command {
    Command::new(env!("CARGO_BIN_EXE_genq"))
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const MICRO_TRAIN: &str = r#"{
  "version": 1,
  "arch": "tiny-cnn",
  "pool": {"n_gen": 100, "n_keep": 20, "corrupt_fraction": 0.5, "corrupt_severity": 5},
  "seeds": [1],
  "train": {"epochs": 2, "lr": 0.05, "momentum": 0.9, "batch": 32, "images_per_class": 30, "eval_per_class": 20},
  "ptq": {"recon_iters": 20, "recon_batch": 16, "recon_lr": 0.01, "calib_sizes": null}
}"#;

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let status = genq().status().unwrap();
    assert_eq!(status.code(), Some(2), "no arguments");
    let status = genq()
        .args(["frobnicate", "--config", "x.json"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2), "unknown command");
    let status = genq().args(["train"]).status().unwrap();
    assert_eq!(status.code(), Some(2), "missing --config");

    let bad = write_cfg(
        dir.path(),
        "bad.json",
        r#"{"version":1,"arch":"tiny-cnn","nope":1}"#,
    );
    let status = genq().args(["train", "--config", &bad]).status().unwrap();
    assert_eq!(status.code(), Some(2), "unknown config key");

    let bad_bits = write_cfg(
        dir.path(),
        "bits.json",
        r#"{"version":1,"arch":"tiny-cnn","bits":{"w":7,"a":4}}"#,
    );
    let status = genq()
        .args(["train", "--config", &bad_bits])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2), "invalid bit width");
}

#[test]
fn missing_model_is_runtime_error_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "cfg.json", MICRO_TRAIN);
    let out = dir.path().join("out");
    let status = genq()
        .args(["filter", "--config", &cfg, "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn train_then_filter_then_ptq_produces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "cfg.json", MICRO_TRAIN);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap().to_string();
    for cmd in ["train", "synth", "filter", "ptq"] {
        let status = genq()
            .args([cmd, "--config", &cfg, "--out", &out_s])
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0), "{cmd} failed");
    }
    for file in [
        "model-tiny-cnn-seed1.gqm",
        "pool-seed1.gqd",
        "filter-seed1.csv",
        "filter-seed1.json",
        "filter-seed1.manifest",
        "model-tiny-cnn-w4a4-ptq-seed1.gqm",
        "report.csv",
    ] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    let rows = genq_cli::report::read_rows(out.join("report.csv")).unwrap();
    assert!(rows.iter().any(|r| r.metric == "eval_accuracy"));
    assert!(rows.iter().any(|r| r.metric == "ptq_accuracy"));
    // the saved quantized model reloads and holds reconstructed rounding
    let qm =
        genq_core::quant::load_quantized(out.join("model-tiny-cnn-w4a4-ptq-seed1.gqm")).unwrap();
    assert_eq!(qm.stage, genq_core::quant::Stage::Reconstructed);
    assert!(qm.wq.iter().all(|q| q.v.is_some()));
}

#[test]
fn identity_ratio_filter_keeps_whole_pool() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{
      "version": 1,
      "arch": "tiny-cnn",
      "pool": {"n_gen": 60, "n_keep": 10, "corrupt_fraction": 0.0, "corrupt_severity": 5},
      "ratios": {"r1": 0.0, "r2": 0.0, "bn_batch": 64},
      "seeds": [1],
      "train": {"epochs": 1, "lr": 0.05, "momentum": 0.9, "batch": 32, "images_per_class": 20, "eval_per_class": 10}
    }"#;
    let cfg = write_cfg(dir.path(), "cfg.json", body);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap().to_string();
    assert_eq!(
        genq()
            .args(["train", "--config", &cfg, "--out", &out_s])
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    assert_eq!(
        genq()
            .args(["filter", "--config", &cfg, "--out", &out_s])
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let manifest = std::fs::read_to_string(out.join("filter-seed1.manifest")).unwrap();
    let ids: Vec<u64> = manifest.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(ids, (0..60u64).collect::<Vec<_>>());
}

#[test]
fn ptq_calib_sweep_emits_one_metric_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{
      "version": 1,
      "arch": "tiny-cnn",
      "bits": {"w": 4, "a": 4},
      "pool": {"n_gen": 200, "n_keep": 40, "corrupt_fraction": 0.0, "corrupt_severity": 5},
      "seeds": [1],
      "train": {"epochs": 2, "lr": 0.05, "momentum": 0.9, "batch": 32, "images_per_class": 30, "eval_per_class": 10},
      "ptq": {"recon_iters": 10, "recon_batch": 16, "recon_lr": 0.01, "calib_sizes": [10, 30]}
    }"#;
    let cfg = write_cfg(dir.path(), "cfg.json", body);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap().to_string();
    assert_eq!(
        genq()
            .args(["train", "--config", &cfg, "--out", &out_s])
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    assert_eq!(
        genq()
            .args(["ptq", "--config", &cfg, "--out", &out_s])
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let rows = genq_cli::report::read_rows(out.join("report.csv")).unwrap();
    assert!(rows.iter().any(|r| r.metric == "ptq_accuracy_calib10"));
    assert!(rows.iter().any(|r| r.metric == "ptq_accuracy_calib30"));
}

#[test]
fn ablate_insufficient_pool_is_config_error_upfront() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{
      "version": 1,
      "arch": "tiny-cnn",
      "pool": {"n_gen": 100, "n_keep": 50, "corrupt_fraction": 0.5, "corrupt_severity": 5},
      "ratios": {"r1": 0.1, "r2": 0.1, "bn_batch": 64},
      "seeds": [1],
      "train": {"epochs": 1, "lr": 0.05, "momentum": 0.9, "batch": 32, "images_per_class": 20, "eval_per_class": 10}
    }"#;
    let cfg = write_cfg(dir.path(), "cfg.json", body);
    let out = dir.path().join("out");
    // r = 0.9 needs n_keep / (0.1 * 0.9) = 556 candidates, pool has 100
    let status = genq()
        .args(["ablate", "--config", &cfg, "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn ablate_emits_five_rows_per_filter_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{
      "version": 1,
      "arch": "tiny-cnn",
      "pool": {"n_gen": 600, "n_keep": 10, "corrupt_fraction": 0.5, "corrupt_severity": 5},
      "ratios": {"r1": 0.5, "r2": 0.0, "bn_batch": 64},
      "seeds": [1, 2],
      "train": {"epochs": 2, "lr": 0.05, "momentum": 0.9, "batch": 32, "images_per_class": 30, "eval_per_class": 10}
    }"#;
    let cfg = write_cfg(dir.path(), "cfg.json", body);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap().to_string();
    assert_eq!(
        genq()
            .args(["train", "--config", &cfg, "--out", &out_s, "--seed", "1"])
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    assert_eq!(
        genq()
            .args(["train", "--config", &cfg, "--out", &out_s, "--seed", "2"])
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    assert_eq!(
        genq()
            .args(["ablate", "--config", &cfg, "--out", &out_s])
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let rows = genq_cli::report::read_rows(out.join("report.csv")).unwrap();
    for sweep in ["ablate-energy", "ablate-stage2"] {
        let count = rows.iter().filter(|r| r.experiment == sweep).count();
        assert_eq!(count, 10, "{sweep}: 5 ratios x 2 seeds");
        for r in rows.iter().filter(|r| r.experiment == sweep) {
            assert!((0.0..=1.0).contains(&r.value), "{:?}", r);
        }
    }
}

#[test]
fn results_do_not_depend_on_worker_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "cfg.json", MICRO_TRAIN);
    let mut reports = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("out-{threads}"));
        let out_s = out.to_str().unwrap().to_string();
        for cmd in ["train", "ptq"] {
            let status = genq()
                .args([cmd, "--config", &cfg, "--out", &out_s])
                .env("GENQ_THREADS", threads)
                .status()
                .unwrap();
            assert_eq!(status.code(), Some(0));
        }
        let model = std::fs::read(out.join("model-tiny-cnn-seed1.gqm")).unwrap();
        let rows: Vec<String> = genq_cli::report::read_rows(out.join("report.csv"))
            .unwrap()
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{:.9}",
                    r.experiment, r.seed, r.stage, r.metric, r.value
                )
            })
            .collect();
        reports.push((model, rows));
    }
    assert_eq!(
        reports[0].0, reports[1].0,
        "model bytes differ across thread counts"
    );
    assert_eq!(
        reports[0].1, reports[1].1,
        "report rows differ across thread counts"
    );
}

#[test]
fn transfer_diagonal_replays_ptq() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap().to_string();
    let body = format!(
        r#"{{
      "version": 1, "arch": "tiny-cnn",
      "bits": {{"w": 4, "a": 4}},
      "pool": {{"n_gen": 120, "n_keep": 20, "corrupt_fraction": 0.5, "corrupt_severity": 5}},
      "seeds": [1],
      "train": {{"epochs": 2, "lr": 0.05, "momentum": 0.9, "batch": 32, "images_per_class": 30, "eval_per_class": 20}},
      "ptq": {{"recon_iters": 15, "recon_batch": 16, "recon_lr": 0.01, "calib_sizes": null}},
      "paths": {{"out_dir": "runs", "model_cnn": "{out_s}/model-tiny-cnn-seed1.gqm", "model_vit": "{out_s}/model-tiny-vit-seed1.gqm"}}
    }}"#
    );
    let cfg = write_cfg(dir.path(), "cfg.json", &body);
    let vit_body = r#"{
      "version": 1, "arch": "tiny-vit",
      "seeds": [1],
      "train": {"epochs": 1, "lr": 0.01, "momentum": 0.9, "batch": 32, "images_per_class": 20, "eval_per_class": 20}
    }"#;
    let vit_cfg = write_cfg(dir.path(), "vit.json", vit_body);
    for (cmd, c) in [
        ("train", &cfg),
        ("train", &vit_cfg),
        ("ptq", &cfg),
        ("transfer", &cfg),
    ] {
        let status = genq()
            .args([cmd, "--config", c, "--out", &out_s])
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0), "{cmd} failed");
    }
    let rows = genq_cli::report::read_rows(out.join("report.csv")).unwrap();
    let ptq_acc = rows
        .iter()
        .find(|r| r.metric == "ptq_accuracy")
        .unwrap()
        .value;
    let diag = rows
        .iter()
        .find(|r| r.metric == "ptq_accuracy_src_tiny-cnn_tgt_tiny-cnn")
        .unwrap()
        .value;
    // same pool, same filter, same calibration, same reconstruction seed
    assert_eq!(ptq_acc, diag, "transfer diagonal must replay the ptq run");
    assert!(rows
        .iter()
        .any(|r| r.metric == "transfer_drop_tgt_tiny-cnn"));
}

/// Mock generation server answering every request with a fixed 32x32 image.
fn spawn_mock_server(requests_to_serve: usize) -> (String, std::thread::JoinHandle<usize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut served = 0usize;
        while served < requests_to_serve {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let mut content_len = 0usize;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if let Some(v) = h.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_len = v.trim().parse().unwrap();
                }
                if h == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; content_len];
            reader.read_exact(&mut body).unwrap();
            let floats: Vec<u8> = (0..32 * 32 * 3)
                .flat_map(|i| (((i % 13) as f32) / 13.0).to_le_bytes())
                .collect();
            use base64::Engine as _;
            let b64 = base64::engine::general_purpose::STANDARD.encode(&floats);
            let json = format!("{{\"width\":32,\"height\":32,\"pixels\":\"{b64}\"}}");
            let reply = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
                json.len(),
                json
            );
            reader.into_inner().write_all(reply.as_bytes()).unwrap();
            served += 1;
        }
        served
    });
    (format!("http://{addr}"), handle)
}

#[test]
fn synth_uses_the_external_endpoint_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    let (endpoint, server) = spawn_mock_server(20);
    let body = r#"{
      "version": 1,
      "arch": "tiny-cnn",
      "pool": {"n_gen": 20, "n_keep": 4, "corrupt_fraction": 0.0, "corrupt_severity": 5},
      "seeds": [1],
      "gen": {"endpoint": null, "guidance_scale": 3.5, "steps": 4, "parallel": 2}
    }"#;
    let cfg = write_cfg(dir.path(), "cfg.json", body);
    let out = dir.path().join("out");
    let status = genq()
        .args(["synth", "--config", &cfg, "--out", out.to_str().unwrap()])
        .env("GENQ_ENDPOINT", &endpoint)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert_eq!(server.join().unwrap(), 20);
    let pool = genq_core::datasrc::load_dataset(out.join("pool-seed1.gqd")).unwrap();
    assert_eq!(pool.len(), 20);
    // the mock's fixed pattern (planar pixel 1 of channel 0 is interleaved
    // index 3), not procedural shapes
    assert!((pool.images.data()[1] - 3.0 / 13.0).abs() < 1e-6);
}
