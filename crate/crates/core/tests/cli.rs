use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use klrpn::cli::{write_head, EXIT_DIVERGENCE, EXIT_OK, EXIT_VALIDATION, HEAD_FILE, HISTORY_FILE, SUMMARY_FILE};
use klrpn::eval::{read_csv_file, to_csv_string, DecileSummary, OffsetScoreRecord};
use klrpn::training::head::ToyHead;
use klrpn::training::TrainingHistory;
use tempfile::TempDir;

const SHORT_RUN: &str = "\
[train]
steps = 300
eval_every = 100
monitor_scenes = 4

[eval]
scenes = 8
bootstrap_resamples = 200
";

fn klrpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_klrpn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_into(config: &Path, out: &Path, variant: &str) {
    let o = klrpn(&["train", "--config", s(config), "--out", s(out), "--variant", variant]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
}

#[test]
fn train_writes_head_and_history() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SHORT_RUN);
    let out = dir.path().join("out");
    train_into(&cfg, &out, "kl_rpn");

    let history = TrainingHistory::read(&out.join(HISTORY_FILE)).unwrap();
    assert_eq!(history.records.len(), 300);
    assert!(history.records[99].recall.is_some());
    assert!(history.records[100].recall.is_none());
    assert!(history.final_recall().is_some());
    let head: ToyHead = serde_json::from_str(&fs::read_to_string(out.join(HEAD_FILE)).unwrap()).unwrap();
    assert!(head.check().is_ok());
}

#[test]
fn identical_runs_give_identical_files() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SHORT_RUN);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        train_into(&cfg, &out.join("kl"), "kl_rpn");
        train_into(&cfg, &out.join("base"), "baseline_rpn");
        let o = klrpn(&[
            "analyze-offsets",
            "--head",
            s(&out.join("kl").join(HEAD_FILE)),
            "--baseline-head",
            s(&out.join("base").join(HEAD_FILE)),
            "--config",
            s(&cfg),
            "--out",
            s(&out.join("analysis")),
        ]);
        assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    }
    for rel in [
        "kl/history.jsonl",
        "kl/head.json",
        "base/history.jsonl",
        "analysis/records_kl_rpn.csv",
        "analysis/records_baseline_rpn.csv",
        "analysis/summary.csv",
    ] {
        assert_eq!(
            fs::read(a.join(rel)).unwrap(),
            fs::read(b.join(rel)).unwrap(),
            "{rel} differs"
        );
    }

    // every emitted table parses back to the same bytes
    let records: Vec<OffsetScoreRecord> = read_csv_file(&a.join("analysis/records_kl_rpn.csv")).unwrap();
    assert!(!records.is_empty());
    assert!(records.iter().all(|r| r.abs_offset >= 0.0 && r.score.is_finite()));
    assert_eq!(
        to_csv_string(&records).unwrap(),
        fs::read_to_string(a.join("analysis/records_kl_rpn.csv")).unwrap()
    );
    let summary: Vec<DecileSummary> = read_csv_file(&a.join("analysis").join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.len(), 8);
    assert_eq!(
        to_csv_string(&summary).unwrap(),
        fs::read_to_string(a.join("analysis").join(SUMMARY_FILE)).unwrap()
    );
}

#[test]
fn negative_learning_rate_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[train]\nlearning_rate = -0.001\n");
    let o = klrpn(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&o), EXIT_VALIDATION);
    assert!(stderr(&o).contains("train.learning_rate"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_key_is_rejected_with_its_path() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "typo.toml", "[scene]\nfeature_dims = 8\n");
    let o = klrpn(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&o), EXIT_VALIDATION);
    assert!(stderr(&o).contains("scene.feature_dims"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_validation_code() {
    assert_eq!(code(&klrpn(&["train", "--config", "x.toml"])), EXIT_VALIDATION);
    assert_eq!(
        code(&klrpn(&[
            "train",
            "--config",
            "x.toml",
            "--out",
            "o",
            "--variant",
            "yolo"
        ])),
        EXIT_VALIDATION
    );
    assert_eq!(code(&klrpn(&["frobnicate"])), EXIT_VALIDATION);
    assert_eq!(code(&klrpn(&["--help"])), EXIT_OK);
}

#[test]
fn divergence_has_its_own_exit_code() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "hot.toml",
        &SHORT_RUN.replace("[train]\n", "[train]\nlearning_rate = 1e300\n"),
    );
    let o = klrpn(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&o), EXIT_DIVERGENCE, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

#[test]
fn evaluate_reports_recall_table() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SHORT_RUN);
    let out = dir.path().join("out");
    train_into(&cfg, &out, "kl_rpn");
    let o = klrpn(&["evaluate", "--head", s(&out.join(HEAD_FILE)), "--config", s(&cfg)]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<String>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    let recall = |k: &str, iou: &str| -> f64 {
        rows.iter().find(|r| r[0] == k && r[1] == iou).unwrap()[2]
            .parse()
            .unwrap()
    };
    for iou in ["0.5", "0.7"] {
        assert!(recall("1000", iou) >= recall("300", iou));
    }
}

#[test]
fn evaluate_missing_head_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SHORT_RUN);
    let o = klrpn(&[
        "evaluate",
        "--head",
        s(&dir.path().join("nope.json")),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(code(&o), EXIT_VALIDATION);
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));
}

#[test]
fn oracle_head_recovers_every_object_on_noiseless_scenes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "clean.toml",
        "[scene]\noffset_noise = 0.0\nfg_noise = 0.0\npadding_noise = 0.0\n\n[eval]\nscenes = 20\n",
    );
    let head_path = dir.path().join("oracle.json");
    write_head(
        &ToyHead::oracle(klrpn::training::scene::SceneConfig::default().feature_dim, -8.0),
        &head_path,
    )
    .unwrap();
    let o = klrpn(&["evaluate", "--head", s(&head_path), "--config", s(&cfg)]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    for line in text.lines().skip(1) {
        assert_eq!(line.split(',').nth(2), Some("1.0"), "{line}");
    }
}

#[test]
fn untrained_head_evaluates_without_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SHORT_RUN);
    let head_path = dir.path().join("zero.json");
    let dim = klrpn::training::scene::SceneConfig::default().feature_dim;
    write_head(
        &ToyHead::zeros(klrpn::training::head::HeadVariant::KlRpn, dim),
        &head_path,
    )
    .unwrap();
    let o = klrpn(&["evaluate", "--head", s(&head_path), "--config", s(&cfg)]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
}

#[test]
fn analyze_rejects_swapped_heads() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SHORT_RUN);
    let dim = klrpn::training::scene::SceneConfig::default().feature_dim;
    let kl = dir.path().join("kl.json");
    write_head(&ToyHead::zeros(klrpn::training::head::HeadVariant::KlRpn, dim), &kl).unwrap();
    let o = klrpn(&[
        "analyze-offsets",
        "--head",
        s(&kl),
        "--baseline-head",
        s(&kl),
        "--config",
        s(&cfg),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), EXIT_VALIDATION);
    assert!(stderr(&o).contains("--baseline-head"), "{}", stderr(&o));
}

#[test]
fn self_checks_pass() {
    for cmd in ["grad-check", "selftest"] {
        let o = klrpn(&[cmd]);
        assert_eq!(code(&o), EXIT_OK, "{cmd}: {}", String::from_utf8_lossy(&o.stdout));
        let text = String::from_utf8(o.stdout).unwrap();
        assert!(text.lines().count() >= 4);
        assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
    }
}
