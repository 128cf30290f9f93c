use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cmcd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmcd"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CMCD_CONFIG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmcd(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(cmcd(&[], dir.path()).status.code(), Some(1));
    assert_eq!(
        cmcd(&["eval"], dir.path()).status.code(),
        Some(1),
        "--checkpoint is required"
    );
    assert_eq!(cmcd(&["train", "--seed", "x"], dir.path()).status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmcd(&["eval", "--checkpoint", "missing.bin"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not found"), "{}", stderr(&o));
}

#[test]
fn config_problems_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"steps": 2, "unknown_key": 1}"#).unwrap();
    let o = cmcd(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown_key"));

    let o = cmcd(&["train", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("corpus"));

    let o = cmcd(&["synth-corpus", "--config", "absent.json", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let expected: [(&str, &[&str]); 5] = [
        ("build-corpus", &["--config", "--seed", "--threads", "--out"]),
        ("synth-corpus", &["--config", "--seed", "--threads", "--out"]),
        (
            "train",
            &["--config", "--seed", "--threads", "--corpus", "--out", "--checkpoint"],
        ),
        (
            "eval",
            &["--config", "--seed", "--threads", "--checkpoint", "--corpus", "--out"],
        ),
        (
            "inspect-affinity",
            &[
                "--config",
                "--seed",
                "--threads",
                "--checkpoint",
                "--audio",
                "--text",
                "--dictionary",
                "--out",
            ],
        ),
    ];
    for (sub, flags) in expected {
        let o = cmcd(&[sub, "--help"], dir.path());
        assert_eq!(o.status.code(), Some(0));
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{sub} --help lacks {f}");
        }
    }
}

#[test]
fn config_path_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("env.json"),
        r#"{"n_keywords": 2, "n_samples_per": 1, "out": "toy"}"#,
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cmcd"))
        .arg("synth-corpus")
        .current_dir(dir.path())
        .env("CMCD_CONFIG", "env.json")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("synth-corpus: 2 keywords"));
    assert!(dir.path().join("toy/corpus.json").is_file());
}

#[test]
fn train_eval_and_inspect_happy_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"n_keywords": 4, "n_samples_per": 2, "steps": 2, "batch_size": 2, "model_dim": 6, "corpus": "toy", "out": "run"}"#,
    )
    .unwrap();
    let ok = |args: &[&str]| {
        let o = cmcd(args, dir.path());
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        stdout(&o)
    };
    ok(&["synth-corpus", "--config", "cfg.json", "--out", "toy"]);
    let summary = ok(&["train", "--config", "cfg.json"]);
    assert!(summary.starts_with("train: 2 steps"), "{summary}");
    for f in ["checkpoint.bin", "metrics.csv", "train_config.json"] {
        assert!(dir.path().join("run").join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,l_dn,l_mm,l_d,total,phase\n"));

    let summary = ok(&[
        "eval",
        "--config",
        "cfg.json",
        "--checkpoint",
        "run/checkpoint.bin",
        "--out",
        "rep",
    ]);
    assert!(summary.starts_with("eval: eer "), "{summary}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("rep/report.json")).unwrap()).unwrap();
    assert!(report["eer"].as_f64().is_some());

    let wav = fs::read_dir(dir.path().join("toy/audio"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let summary = ok(&[
        "inspect-affinity",
        "--checkpoint",
        "run/checkpoint.bin",
        "--audio",
        wav.to_str().unwrap(),
        "--text",
        "some keyword",
        "--out",
        "maps/one",
    ]);
    assert!(summary.contains("p=0."), "{summary}");
    let pgm = fs::read(dir.path().join("maps/one.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
}
