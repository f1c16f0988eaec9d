//! End-to-end tests for every subcommand, driving the built binary through
//! temp files. Exit codes: 0 success, 1 usage, 2 data.

use std::path::Path;
use std::process::{Command, Output};

use kgt_core::pgm::{encode_pgm, GrayImage};

fn kgt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn write_test_pgm(path: &Path, w: usize, h: usize) {
    let samples: Vec<u8> = (0..w * h).map(|i| ((i * 7) % 256) as u8).collect();
    let img = GrayImage::new(w, h, samples).unwrap();
    std::fs::write(path, encode_pgm(&img)).unwrap();
}

#[test]
fn build_graph_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.pgm");
    let out = dir.path().join("graph.csv");
    write_test_pgm(&img, 16, 16);

    let r = kgt(&[
        "build-graph",
        "--in",
        img.to_str().unwrap(),
        "--window",
        "4",
        "--k",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("window,row,rank,neighbor"));
    // 16 windows x 16 nodes x k=3 data rows
    assert_eq!(csv.lines().count(), 1 + 16 * 16 * 3);
}

#[test]
fn build_graph_rejects_bad_pgm_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("bad.pgm");
    std::fs::write(&img, b"P6 not a pgm").unwrap();
    let out = dir.path().join("graph.csv");
    let r = kgt(&[
        "build-graph",
        "--in",
        img.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("pgm"));
}

#[test]
fn missing_required_argument_is_usage_error() {
    let r = kgt(&["build-graph", "--window", "4"]);
    assert_eq!(code(&r), 1);
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let r = kgt(&["frobnicate"]);
    assert_eq!(code(&r), 1);
}

#[test]
fn flops_prints_every_backend() {
    let r = kgt(&["flops", "--hw", "64", "--k", "8", "--d", "16", "--heads", "2"]);
    assert_eq!(code(&r), 0);
    let out = String::from_utf8_lossy(&r.stdout);
    for label in ["dense", "gather", "mask", "streaming"] {
        assert!(out.contains(label), "missing {label} in:\n{out}");
    }
    // spec'd closed form: dense 524288 at heads=2, sparse 65536
    assert!(out.contains("524288"));
    assert!(out.contains("65536"));

    let r = kgt(&["flops", "--hw", "64", "--k", "0"]);
    assert_eq!(code(&r), 1, "k=0 is a usage error");
    let r = kgt(&["flops", "--hw", "64", "--k", "64"]);
    assert_eq!(code(&r), 1, "k=hw is a usage error");
}

#[test]
fn attn_bench_small_grid_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let r = kgt(&[
        "attn-bench",
        "--grid",
        "small",
        "--repeats",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("n_nodes,k,d,heads,backend,flops,peak_aux_bytes,wall_ms,skipped\n"));
    assert!(csv.lines().count() > 8);

    let r = kgt(&["attn-bench", "--grid", "nope", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 1);
}

#[test]
fn gradcheck_passes_and_prints_lines() {
    let r = kgt(&["gradcheck", "--seed", "1"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let out = String::from_utf8_lossy(&r.stdout);
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 20);
    assert!(!out.contains("FAIL"));
}

#[test]
fn train_then_denoise_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("train.cfg");
    std::fs::write(
        &cfg_path,
        "# tiny smoke config\nchannels = 4\nstages = 1\nlayers = 1\nheads = 2\nwindow = 4\n\
         steps = 3\nbatch = 2\npatch = 16\nsigma = 25\nschedule = random:2,3\neval_every = 2\neval_count = 1\n",
    )
    .unwrap();
    let model = dir.path().join("model.kgt");
    let r = kgt(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let log = String::from_utf8_lossy(&r.stdout);
    assert!(log.starts_with("step,k,loss,lr,psnr_val\n"));
    assert_eq!(log.lines().count(), 1 + 3, "one row per step");
    // eval steps carry a psnr value, others leave the column blank
    assert!(log.lines().nth(1).unwrap().ends_with(','));
    assert!(!log.lines().nth(2).unwrap().ends_with(','));
    assert!(model.exists());

    let noisy = dir.path().join("noisy.pgm");
    write_test_pgm(&noisy, 20, 12);
    let clean = dir.path().join("clean.pgm");
    let r = kgt(&[
        "denoise",
        "--model",
        model.to_str().unwrap(),
        "--in",
        noisy.to_str().unwrap(),
        "--out",
        clean.to_str().unwrap(),
        "--k",
        "3",
        "--backend",
        "streaming",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let img = kgt_core::pgm::read_pgm(&clean).unwrap();
    assert_eq!((img.width, img.height), (20, 12));
}

#[test]
fn train_rejects_config_typo_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("train.cfg");
    std::fs::write(&cfg_path, "wnidow = 4\n").unwrap();
    let model = dir.path().join("model.kgt");
    let r = kgt(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("wnidow"));
}

#[test]
fn denoise_rejects_corrupt_model_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.kgt");
    std::fs::write(&model, b"XXXX not a checkpoint").unwrap();
    let noisy = dir.path().join("noisy.pgm");
    write_test_pgm(&noisy, 8, 8);
    let out = dir.path().join("out.pgm");
    let r = kgt(&[
        "denoise",
        "--model",
        model.to_str().unwrap(),
        "--in",
        noisy.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("magic"));
}

#[test]
fn bad_backend_value_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.kgt");
    let noisy = dir.path().join("noisy.pgm");
    write_test_pgm(&noisy, 8, 8);
    let r = kgt(&[
        "denoise",
        "--model",
        model.to_str().unwrap(),
        "--in",
        noisy.to_str().unwrap(),
        "--out",
        noisy.to_str().unwrap(),
        "--backend",
        "teleport",
    ]);
    assert_eq!(code(&r), 1);
}
