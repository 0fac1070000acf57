mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_crackseg");

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.toml")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_verb_is_a_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn help_exits_cleanly() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for verb in ["train", "evaluate", "infer", "report", "validate-data"] {
        assert!(stdout(&o).contains(verb), "{verb} missing from help");
    }
}

#[test]
fn unknown_override_key_names_the_key() {
    let o = run(&["validate-data", "--set", "heads.rpn_test.bogus=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("heads.rpn_test.bogus"), "{}", stderr(&o));
}

#[test]
fn unset_annotations_are_reported() {
    let o = run(&["validate-data", "--config", toy_config().to_str().unwrap(), "--set", "lr=0.002"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data.annotations"), "{}", stderr(&o));
}

#[test]
fn validate_data_summarises_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic(dir.path(), 4, 1, 1);
    let ann = dir.path().join("annotations.json");
    let o = run(&["validate-data", "--set", &format!("data.annotations={}", ann.display())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let expected = format!("ok: 4 images (3 with cracks), {} instances, digest {}\n", data.num_instances(), data.digest());
    assert_eq!(stdout(&o), expected);

    std::fs::remove_file(data.image_path(&data.records()[0])).unwrap();
    let o = run(&["validate-data", "--set", &format!("data.annotations={}", ann.display())]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn malformed_annotations_are_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("bad.json");
    std::fs::write(&ann, "{\"images\": [{\"id\": 1, \"file_name\": \"a.png\", \"width\": 0, \"height\": 4}]}").unwrap();
    let o = run(&["validate-data", "--set", &format!("data.annotations={}", ann.display())]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn train_evaluate_infer_report_flow() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic(&dir.path().join("data"), 6, 1, 2);
    let ann = dir.path().join("data/annotations.json");
    let cfg = toy_config();
    let base = [
        "--config".to_string(),
        cfg.display().to_string(),
        "--set".into(),
        format!("data.annotations={}", ann.display()),
        "--set".into(),
        "epochs=2".into(),
        "--set".into(),
        "data.val_fraction=0.2".into(),
        "--set".into(),
        "data.train_fraction=0.6".into(),
    ];
    let with = |verb: &str, extra: &[String]| -> Output {
        let mut args = vec![verb.to_string()];
        args.extend(base.iter().cloned());
        args.extend(extra.iter().cloned());
        run(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let run_dir = dir.path().join("run");
    let o = with("train", &["--out".into(), run_dir.display().to_string()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = run_dir.join("last.ckpt");
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap().lines().count(), 3);

    let report_a = dir.path().join("a.json");
    let report_b = dir.path().join("b.json");
    for (path, label) in [(&report_a, "first"), (&report_b, "second")] {
        let o = with(
            "evaluate",
            &[
                "--checkpoint".into(),
                ckpt.display().to_string(),
                "--split".into(),
                "all".into(),
                "--label".into(),
                label.into(),
                "--out".into(),
                path.display().to_string(),
            ],
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let o = run(&["report", "--from", report_a.to_str().unwrap(), report_b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("first") && stdout(&o).contains("second"));

    // Reports over a different dataset cannot share a table.
    let mut other: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report_b).unwrap()).unwrap();
    other["dataset_digest"] = "0000".into();
    std::fs::write(&report_b, other.to_string()).unwrap();
    let o = run(&["report", "--from", report_a.to_str().unwrap(), report_b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let out = dir.path().join("detections");
    let image = data.image_path(&data.records()[0]);
    let o = with(
        "infer",
        &[
            "--checkpoint".into(),
            ckpt.display().to_string(),
            "--out".into(),
            out.display().to_string(),
            image.display().to_string(),
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stem = image.file_stem().unwrap().to_string_lossy().into_owned();
    assert!(out.join(format!("{stem}.json")).exists());
    assert!(out.join(format!("{stem}.overlay.png")).exists());

    let o = with(
        "infer",
        &[
            "--checkpoint".into(),
            ckpt.display().to_string(),
            "--out".into(),
            out.display().to_string(),
            dir.path().join("nope.png").display().to_string(),
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    common::synthetic(dir.path(), 2, 0, 3);
    let ann = dir.path().join("annotations.json");
    let o = run(&[
        "evaluate",
        "--set",
        &format!("data.annotations={}", ann.display()),
        "--checkpoint",
        dir.path().join("none.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
