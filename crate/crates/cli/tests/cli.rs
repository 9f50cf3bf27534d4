use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
seed = 4

[data]
train = 512
val = 128

[pretrain]
epochs = 20
min_accuracy = 0.5

[train]
epochs = 2
batch_size = 32

[eval]
budgets = [0.1, 0.2]
"#;

fn toksel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toksel"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = toksel(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_dir() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    dir
}

/// gen-data, pretrain-backbone and train-scorer on the small config.
fn trained(dir: &Path) -> PathBuf {
    let c = ["--config", "run.toml"];
    ok(dir, &[&["gen-data", "--out", "d.dtks"][..], &c].concat());
    ok(
        dir,
        &[
            &[
                "pretrain-backbone",
                "--dataset",
                "d.dtks",
                "--out",
                "bb.dtkc",
            ][..],
            &c,
        ]
        .concat(),
    );
    ok(
        dir,
        &[
            &[
                "train-scorer",
                "--dataset",
                "d.dtks",
                "--checkpoint",
                "bb.dtkc",
                "--out",
                "sc.dtkc",
            ][..],
            &c,
        ]
        .concat(),
    );
    dir.join("sc.dtkc")
}

#[test]
fn gen_data_writes_magic_and_is_reproducible() {
    let dir = small_dir();
    let d = dir.path();
    ok(d, &["gen-data", "--config", "run.toml", "--out", "a.dtks"]);
    ok(d, &["gen-data", "--config", "run.toml", "--out", "b.dtks"]);
    ok(
        d,
        &[
            "gen-data", "--config", "run.toml", "--seed", "5", "--out", "c.dtks",
        ],
    );
    let a = fs::read(d.join("a.dtks")).unwrap();
    assert_eq!(&a[..4], b"DTKS");
    assert_eq!(a, fs::read(d.join("b.dtks")).unwrap());
    assert_ne!(a, fs::read(d.join("c.dtks")).unwrap());
}

#[test]
fn default_config_writes_dataset() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["gen-data", "--out", "d.dtks"]);
    assert_eq!(&fs::read(dir.path().join("d.dtks")).unwrap()[..4], b"DTKS");
}

#[test]
fn impossible_task_spec_is_rejected() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        "[task]\nn_min = 8\nn_max = 16\nsignal_tokens = 6\nsink_count = 4\n",
    )
    .unwrap();
    let out = toksel(
        dir.path(),
        &["gen-data", "--config", "bad.toml", "--out", "d.dtks"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("task spec error"), "{}", stderr(&out));
    assert!(!dir.path().join("d.dtks").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nbudgett = 0.3\n").unwrap();
    let out = toksel(dir.path(), &["gradcheck", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("budgett"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(toksel(dir.path(), &["gen-data"]).status.code(), Some(1));
    assert_eq!(
        toksel(dir.path(), &["no-such-command"]).status.code(),
        Some(1)
    );
    let out = toksel(
        dir.path(),
        &["gen-data", "--budget", "1.5", "--out", "d.dtks"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(toksel(dir.path(), &["--help"]).status.success());
}

#[test]
fn missing_inputs_are_named() {
    let dir = TempDir::new().unwrap();
    let out = toksel(
        dir.path(),
        &[
            "sweep",
            "--dataset",
            "nowhere.dtks",
            "--checkpoint",
            "x.dtkc",
            "--out",
            "r",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere.dtks"), "{}", stderr(&out));
    let out = toksel(dir.path(), &["gradcheck", "--config", "absent.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent.toml"));
}

#[test]
fn gradcheck_passes() {
    let dir = TempDir::new().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--out", "gc.json"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("difftopk minimal n=2 k=1"));
    assert!(!text.contains("FAIL"));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("gc.json")).unwrap()).unwrap();
    assert_eq!(report["cases"].as_array().unwrap().len(), 103);
}

#[test]
fn pipeline_end_to_end() {
    let dir = small_dir();
    let d = dir.path();
    let ck = trained(d);
    let first_log = fs::read(d.join("sc.dtkc.log.jsonl")).unwrap();
    assert!(first_log.starts_with(b"{\"kind\":\"step\""));

    // the same inputs and seed reproduce the log and checkpoint
    let ck_bytes = fs::read(&ck).unwrap();
    ok(
        d,
        &[
            "train-scorer",
            "--config",
            "run.toml",
            "--dataset",
            "d.dtks",
            "--checkpoint",
            "bb.dtkc",
            "--out",
            "again.dtkc",
        ],
    );
    assert_eq!(first_log, fs::read(d.join("again.dtkc.log.jsonl")).unwrap());
    assert_eq!(ck_bytes, fs::read(d.join("again.dtkc")).unwrap());

    // flag override beats the file and is echoed
    let args = [
        "eval",
        "--config",
        "run.toml",
        "--dataset",
        "d.dtks",
        "--checkpoint",
        "sc.dtkc",
        "--budget",
        "0.1",
        "--out",
        "ev",
    ];
    ok(d, &args);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("ev.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["eval"]["budget"], 0.1);
    assert_eq!(report["config"]["train"]["budget"], 0.1);
    assert!(report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["budget"] == 0.1));

    let sweep = [
        "sweep",
        "--config",
        "run.toml",
        "--dataset",
        "d.dtks",
        "--checkpoint",
        "sc.dtkc",
    ];
    ok(d, &[&sweep[..], &["--out", "s1"]].concat());
    ok(d, &[&sweep[..], &["--out", "s2"]].concat());
    for ext in ["json", "csv"] {
        let a = fs::read(d.join(format!("s1.{ext}"))).unwrap();
        assert_eq!(a, fs::read(d.join(format!("s2.{ext}"))).unwrap(), "{ext}");
    }
    let csv = fs::read_to_string(d.join("s1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 2);

    ok(
        d,
        &[
            "dump-scores",
            "--config",
            "run.toml",
            "--dataset",
            "d.dtks",
            "--checkpoint",
            "sc.dtkc",
            "--out",
            "scores.csv",
        ],
    );
    let scores = fs::read_to_string(d.join("scores.csv")).unwrap();
    assert!(scores.starts_with("seq_id,token_index,score,soft_mask,hard_selected,is_signal"));

    ok(
        d,
        &[
            "bench",
            "--config",
            "run.toml",
            "--checkpoint",
            "sc.dtkc",
            "--out",
            "bench.json",
        ],
    );
    let bench: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("bench.json")).unwrap()).unwrap();
    assert_eq!(bench["bench"]["kept"], 410);
}

#[test]
fn corrupted_checkpoint_is_refused() {
    let dir = small_dir();
    let d = dir.path();
    let ck = trained(d);
    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&ck, bytes).unwrap();
    let out = toksel(
        d,
        &[
            "eval",
            "--config",
            "run.toml",
            "--dataset",
            "d.dtks",
            "--checkpoint",
            "sc.dtkc",
            "--out",
            "ev",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("integrity"), "{}", stderr(&out));
    assert!(!d.join("ev.json").exists());
}

#[test]
fn backbone_only_checkpoint_cannot_be_evaluated() {
    let dir = small_dir();
    let d = dir.path();
    trained(d);
    let out = toksel(
        d,
        &[
            "eval",
            "--config",
            "run.toml",
            "--dataset",
            "d.dtks",
            "--checkpoint",
            "bb.dtkc",
            "--out",
            "ev",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no scorer section"));
}
