//! End-to-end runs of the `durr` binary on a tiny corpus.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn durr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_durr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = durr(dir, args);
    assert!(
        out.status.success(),
        "durr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn train_restorer(dir: &Path, tag: &str) {
    let (out, log) = (format!("r{tag}.ckpt"), format!("r{tag}.csv"));
    ok(
        dir,
        &[
            "train-restorer", "--corpus", "corpus", "--schedule", "15:1,25:2", "--out", &out, "--log", &log,
            "--iterations", "12", "--batch", "2", "--patch", "16", "--width-scale", "0.125", "--seed", "5",
        ],
    );
}

fn train_policy(dir: &Path, tag: &str) {
    let (out, log) = (format!("p{tag}.ckpt"), format!("p{tag}.csv"));
    ok(
        dir,
        &[
            "train-policy", "--corpus", "corpus", "--restorer", "ra.ckpt", "--out", &out, "--log", &log,
            "--steps", "700", "--episodes", "12", "--val-episodes", "4", "--max-steps", "5", "--levels", "15,25",
            "--width-scale", "0.25", "--patch", "16", "--seed", "5",
        ],
    );
}

fn eval(dir: &Path, tag: &str, threads: &str) {
    let (out, detail) = (format!("e{tag}.csv"), format!("d{tag}.csv"));
    ok(
        dir,
        &[
            "eval", "--corpus", "corpus", "--restorer", "ra.ckpt", "--policy-ckpt", "pa.ckpt", "--policies",
            "dqn,decorr,fixed:2,oracle", "--levels", "15,25", "--max-steps", "5", "--seed", "7", "--threads", threads,
            "--out", &out, "--detail", &detail,
        ],
    );
}

fn same_bytes(dir: &Path, a: &str, b: &str) {
    let (x, y) = (fs::read(dir.join(a)).unwrap(), fs::read(dir.join(b)).unwrap());
    assert!(!x.is_empty(), "{a} is empty");
    assert!(x == y, "{a} and {b} differ");
}

#[test]
fn seeded_pipeline_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-corpus", "--out", "corpus", "--count", "10", "--width", "24", "--height", "24", "--seed", "3"]);
    assert_eq!(fs::read_dir(dir.join("corpus")).unwrap().count(), 10);

    train_restorer(dir, "a");
    train_restorer(dir, "b");
    same_bytes(dir, "ra.csv", "rb.csv");
    same_bytes(dir, "ra.ckpt", "rb.ckpt");

    train_policy(dir, "a");
    train_policy(dir, "b");
    same_bytes(dir, "pa.csv", "pb.csv");
    same_bytes(dir, "pa.ckpt", "pb.ckpt");

    eval(dir, "a", "1");
    eval(dir, "b", "2");
    same_bytes(dir, "ea.csv", "eb.csv");
    same_bytes(dir, "da.csv", "db.csv");
    let summary = fs::read_to_string(dir.join("ea.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), "level,policy,mean_psnr,mean_ssim,mean_stop,count");
    assert_eq!(summary.lines().count(), 1 + 2 * 4);

    let info = ok(dir, &["inspect-ckpt", "pa.ckpt"]);
    assert!(info.contains("unit: policy"), "{info}");
    assert!(info.contains("optimizer: rmsprop"), "{info}");
}

#[test]
fn degrade_restore_and_trajectory_round_trip_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-corpus", "--out", "corpus", "--count", "4", "--width", "24", "--height", "20", "--seed", "1"]);
    ok(dir, &["degrade", "--input", "corpus/img_0000.pgm", "--out", "noisy.pgm", "--sigma", "25", "--seed", "2"]);
    ok(dir, &["degrade", "--input", "corpus", "--out", "blocky", "--task", "deblock", "--qf", "20"]);
    assert_eq!(fs::read_dir(dir.join("blocky")).unwrap().count(), 4);
    train_restorer(dir, "a");

    let said = ok(
        dir,
        &[
            "restore", "--input", "noisy.pgm", "--restorer", "ra.ckpt", "--out", "clean.pgm", "--policy", "oracle",
            "--ground-truth", "corpus/img_0000.pgm", "--max-steps", "4",
        ],
    );
    assert!(said.contains("PSNR"), "{said}");
    assert!(fs::read(dir.join("clean.pgm")).unwrap().starts_with(b"P5"));

    ok(
        dir,
        &[
            "trajectory", "--input", "noisy.pgm", "--restorer", "ra.ckpt", "--steps", "3", "--ground-truth",
            "corpus/img_0000.pgm", "--csv", "traj.csv", "--images", "traj",
        ],
    );
    let csv = fs::read_to_string(dir.join("traj.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,psnr,ssim");
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(fs::read_dir(dir.join("traj")).unwrap().count(), 4);
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(durr(dir, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(durr(dir, &["degrade", "--input", "x.pgm", "--out", "y.pgm"]).status.code(), Some(1));
    assert_eq!(durr(dir, &["inspect-ckpt", "missing.ckpt"]).status.code(), Some(2));
    fs::write(dir.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = durr(dir, &["inspect-ckpt", "junk.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
    assert_eq!(durr(dir, &["--help"]).status.code(), Some(0));
}
