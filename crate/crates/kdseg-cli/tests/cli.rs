//! End-to-end checks of the `kdseg` binary: pipeline wiring, reductions
//! between commands, reproducibility, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kdseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_small_data(dir: &Path) -> (String, String, String) {
    let data = dir.join("data");
    let out = run(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--train",
        "20",
        "--val",
        "8",
        "--unlabeled",
        "10",
        "--size",
        "16",
        "--classes",
        "4",
        "--seed",
        "5",
    ]);
    assert_ok(&out);
    (
        data.join("train.txt").display().to_string(),
        data.join("val.txt").display().to_string(),
        data.join("unlabeled.txt").display().to_string(),
    )
}

fn dir_fingerprint(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<PathBuf> = walk(dir);
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p.strip_prefix(dir).unwrap().to_path_buf(), bytes)
        })
        .collect()
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn gen_data_writes_three_manifests_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (train, val, unlabeled) = gen_small_data(tmp.path());
    for m in [&train, &val, &unlabeled] {
        assert!(Path::new(m).exists(), "{} missing", m);
    }

    let second = tempfile::tempdir().unwrap();
    gen_small_data(second.path());
    let a = dir_fingerprint(&tmp.path().join("data"));
    let b = dir_fingerprint(&second.path().join("data"));
    assert_eq!(a.len(), b.len());
    for ((pa, ba), (pb, bb)) in a.iter().zip(&b) {
        assert_eq!(pa, pb);
        assert_eq!(ba, bb, "{} differs between identical seeds", pa.display());
    }
}

#[test]
fn gen_data_rejects_single_class() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-data",
        "--out",
        tmp.path().join("d").to_str().unwrap(),
        "--classes",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["train", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_epoch_training_writes_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let (train, val, _) = gen_small_data(tmp.path());
    let out_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--role",
        "student",
        "--data",
        &train,
        "--val",
        &val,
        "--out",
        out_dir.to_str().unwrap(),
        "--epochs",
        "0",
        "--seed",
        "9",
    ]);
    assert_ok(&out);

    let loaded = kdseg::models::load_checkpoint(&out_dir.join("student.ckpt")).unwrap();
    let fresh = kdseg::models::build_network::<f32>(
        &kdseg::models::NetworkConfig::student_preset(4, 1.0),
        9,
    )
    .unwrap();
    assert_eq!(loaded.parameters(), fresh.parameters());
    assert!(out_dir.join("run_record.txt").exists());
    assert!(out_dir.join("report.csv").exists());
}

#[test]
fn distill_with_zero_weights_matches_plain_training_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let (train, val, _) = gen_small_data(tmp.path());

    let teacher_dir = tmp.path().join("teacher");
    assert_ok(&run(&[
        "train", "--role", "teacher", "--data", &train, "--val", &val, "--out",
        teacher_dir.to_str().unwrap(), "--epochs", "2", "--seed", "1",
    ]));

    let plain_dir = tmp.path().join("plain");
    assert_ok(&run(&[
        "train", "--role", "student", "--data", &train, "--val", &val, "--out",
        plain_dir.to_str().unwrap(), "--epochs", "2", "--seed", "3",
    ]));

    let distill_dir = tmp.path().join("distill");
    assert_ok(&run(&[
        "distill",
        "--teacher-ckpt",
        teacher_dir.join("teacher.ckpt").to_str().unwrap(),
        "--data", &train, "--val", &val,
        "--out", distill_dir.to_str().unwrap(),
        "--epochs", "2", "--seed", "3",
        "--alpha", "0", "--beta", "0",
    ]));

    let a = std::fs::read(plain_dir.join("student.ckpt")).unwrap();
    let b = std::fs::read(distill_dir.join("student.ckpt")).unwrap();
    assert_eq!(a, b, "zero-weight distillation diverged from plain training");
}

#[test]
fn full_pipeline_succeeds_with_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (train, val, unlabeled) = gen_small_data(tmp.path());

    let teacher_dir = tmp.path().join("teacher");
    assert_ok(&run(&[
        "train", "--role", "teacher", "--data", &train, "--val", &val, "--out",
        teacher_dir.to_str().unwrap(), "--epochs", "2", "--seed", "1",
    ]));

    let joint_dir = tmp.path().join("joint");
    assert_ok(&run(&[
        "distill",
        "--teacher-ckpt",
        teacher_dir.join("teacher.ckpt").to_str().unwrap(),
        "--data", &train, "--val", &val,
        "--out", joint_dir.to_str().unwrap(),
        "--epochs", "2", "--seed", "2",
        "--unlabeled-manifest", &unlabeled,
        "--threshold", "0.5",
    ]));
    for file in ["student.ckpt", "report.csv", "run_record.txt", "pseudo.txt"] {
        assert!(joint_dir.join(file).exists(), "{} missing", file);
    }

    let eval_out = run(&[
        "eval",
        "--data", &val,
        "--ckpt", joint_dir.join("student.ckpt").to_str().unwrap(),
    ]);
    assert_ok(&eval_out);
    let text = String::from_utf8_lossy(&eval_out.stdout);
    assert!(text.contains("miou,"), "metrics missing: {}", text);
}

#[test]
fn eval_on_a_perfect_copy_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, val, _) = gen_small_data(tmp.path());
    let out = run(&["eval", "--data", &val, "--pred", &val]);
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.contains("miou,1.000000"),
        "perfect copy should score 1.0: {}",
        text
    );
}

#[test]
fn bench_reports_throughput_and_validates_iterations() {
    let out = run(&[
        "bench", "--preset", "student", "--size", "16", "--iterations", "5", "--warmup", "1",
    ]);
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("images_per_second="), "{}", text);
    assert!(text.contains("input=16x16"), "{}", text);

    let bad = run(&["bench", "--preset", "student", "--iterations", "0"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn pseudo_label_threshold_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let (train, val, unlabeled) = gen_small_data(tmp.path());
    let teacher_dir = tmp.path().join("teacher");
    assert_ok(&run(&[
        "train", "--role", "teacher", "--data", &train, "--val", &val, "--out",
        teacher_dir.to_str().unwrap(), "--epochs", "1", "--seed", "1",
    ]));
    let out = run(&[
        "pseudo-label",
        "--teacher-ckpt",
        teacher_dir.join("teacher.ckpt").to_str().unwrap(),
        "--manifest", &unlabeled,
        "--out-manifest",
        tmp.path().join("pl/pseudo.txt").to_str().unwrap(),
        "--threshold", "1.1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_record_lists_resolved_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let (train, val, _) = gen_small_data(tmp.path());
    let cfg_file = tmp.path().join("cfg.txt");
    std::fs::write(&cfg_file, "epochs=3\nseed=11\n").unwrap();
    let out_dir = tmp.path().join("run");
    assert_ok(&run(&[
        "train", "--role", "student", "--data", &train, "--val", &val,
        "--out", out_dir.to_str().unwrap(),
        "--config", cfg_file.to_str().unwrap(),
        "--epochs", "2", // flag overrides the file
    ]));
    let record = std::fs::read_to_string(out_dir.join("run_record.txt")).unwrap();
    assert!(record.contains("epochs=2"), "{}", record);
    assert!(record.contains("seed=11"), "{}", record);
    assert!(record.contains("input_hash=fnv64:"), "{}", record);
    assert!(record.contains("final_miou="), "{}", record);
}
