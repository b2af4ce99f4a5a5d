use std::path::Path;
use std::process::{Command, Output};

use nsnquant::formats::{read_codebook_file, write_tensor_file};
use nsnquant_core::{SeededRng, Tensor2D};

const QUICK: [&str; 8] = [
    "--set",
    "kmeans_samples=4096",
    "--set",
    "kmeans_iters=5",
    "--set",
    "tune_steps=20",
    "--set",
    "tune_batch=1024",
];

fn nsnquant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsnquant"))
        .args(args)
        .output()
        .expect("spawn nsnquant")
}

fn build(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["build-codebook", "--out", out.to_str().unwrap()];
    args.extend_from_slice(&QUICK);
    args.extend_from_slice(extra);
    nsnquant(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn build_codebook_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.cb"), dir.path().join("b.cb"));
    for p in [&a, &b] {
        let o = build(p, &["--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.with_extension("json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 3);
    assert!(report["report"]["final_heldout_cossim"].as_f64().unwrap() > 0.5);
}

#[test]
fn no_finetune_leaves_tuned_flag_clear() {
    let dir = tempfile::tempdir().unwrap();
    let (plain, tuned) = (dir.path().join("plain.cb"), dir.path().join("tuned.cb"));
    assert!(build(&plain, &["--no-finetune", "--bit-mode", "1b"])
        .status
        .success());
    assert!(build(&tuned, &["--bit-mode", "1b"]).status.success());
    assert!(!read_codebook_file(&plain).unwrap().is_tuned());
    assert!(read_codebook_file(&tuned).unwrap().is_tuned());
}

#[test]
fn config_file_and_cli_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(
        &cfg,
        "# quick build\nbit_mode = 1b\nseed = 9\nfinetune = false\n",
    )
    .unwrap();
    let out = dir.path().join("cb.cb");
    let o = build(
        &out,
        &["--config", cfg.to_str().unwrap(), "--bit-mode", "2b"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cb = read_codebook_file(&out).unwrap();
    assert_eq!(cb.bit_mode(), nsnquant_core::codebook::BitMode::TwoBit);
    assert_eq!(cb.seed(), 9);
    assert!(!cb.is_tuned());
}

#[test]
fn bad_config_value_exits_with_usage_error() {
    let o = nsnquant(&["stats", "--set", "bit_mode=3b", "--dump", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let o = nsnquant(&["stats", "--set", "no_such_key=1", "--dump", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_passes_and_rejects_corrupt_codebook() {
    let dir = tempfile::tempdir().unwrap();
    let cb = dir.path().join("cb.cb");
    assert!(build(&cb, &[]).status.success());
    let report = dir.path().join("verify.json");
    let o = nsnquant(&[
        "verify",
        "--codebook",
        cb.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["failed"], 0);
    assert_eq!(json["checks"].as_array().unwrap().len(), 29);

    let mut bytes = std::fs::read(&cb).unwrap();
    bytes[0] ^= 0xff;
    let bad = dir.path().join("bad.cb");
    std::fs::write(&bad, &bytes).unwrap();
    let o = nsnquant(&["verify", "--codebook", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn stats_on_empty_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.bin");
    std::fs::write(&empty, b"").unwrap();
    let o = nsnquant(&["stats", "--dump", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
}

#[test]
fn stats_sees_duplicated_channels() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SeededRng::new(1);
    let (rows, cols) = (512, 16);
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        // Every 8-channel group holds one value repeated.
        for _ in 0..cols / 8 {
            let x = rng.normal();
            data.extend(std::iter::repeat_n(x, 8));
        }
    }
    let dump = dir.path().join("dup.bin");
    write_tensor_file(&dump, &Tensor2D::new(rows, cols, data).unwrap()).unwrap();
    let o = nsnquant(&["stats", "--dump", dump.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let mac = json["mean_abs_correlation"].as_f64().unwrap();
    assert!((mac - 1.0).abs() < 1e-6, "{mac}");
    assert!(json["lemma"].is_object());
}

#[test]
fn simulate_residual_only_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cb = dir.path().join("cb.cb");
    assert!(build(&cb, &[]).status.success());
    let o = nsnquant(&[
        "simulate",
        "--codebook",
        cb.to_str().unwrap(),
        "--set",
        "n_prefill=40",
        "--set",
        "n_decode=0",
        "--set",
        "n_heads=2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut reader = csv::Reader::from_reader(o.stdout.as_slice());
    let header = reader.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (nq, score, out) = (
        col("n_quantized"),
        col("score_cossim"),
        col("output_cossim"),
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(&r[nq], "0");
        assert_eq!(r[score].parse::<f32>().unwrap(), 1.0);
        assert_eq!(r[out].parse::<f32>().unwrap(), 1.0);
    }
}

#[test]
fn simulate_from_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let cb = dir.path().join("cb.cb");
    assert!(build(&cb, &[]).status.success());
    let mut rng = SeededRng::new(2);
    let w = nsnquant::simulate::synthetic_workload(&mut rng, 100, 64);
    let names = ["q.bin", "k.bin", "v.bin"].map(|n| dir.path().join(n));
    for (p, t) in names.iter().zip([&w.queries, &w.keys, &w.values]) {
        write_tensor_file(p, t).unwrap();
    }
    let csv_path = dir.path().join("steps.csv");
    let o = nsnquant(&[
        "simulate",
        "--codebook",
        cb.to_str().unwrap(),
        "--set",
        "n_prefill=80",
        "--out",
        csv_path.to_str().unwrap(),
        "--qkv",
        names[0].to_str().unwrap(),
        names[1].to_str().unwrap(),
        names[2].to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    // Header plus the post-prefill step and 20 decode steps.
    assert_eq!(text.lines().count(), 22);
}
