// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"run_id = "t"
repeats = 2

[seeds]
split = 7
synthetic = 11
mocks = 13
baselines = 17

[cohort]
source = "synthetic"

[cohort.spec]
patients = 10
visits = { range = { min = 7, max = 8 } }

[baselines.forest]
n_trees = 10

[baselines.cnn]
epochs = 5

[[backends]]
id = "linear"
kind = "mock"
policy = "linear"

[[backends]]
id = "persistence"
kind = "mock"
policy = "persistence"
"#;

const REMOTE: &str = r#"
[[backends]]
id = "hosted"
kind = "remote"
adapter = "openai_chat"
endpoint = "http://127.0.0.1:9/v1/chat/completions"
model = "m"
api_key_env = "EGFR_TEST_KEY_THAT_IS_NOT_SET"
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_egfr-forecast"))
}

fn setup(text: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn exec(args: &[&str], cfg: &Path) -> Output {
    let mut c = bin();
    let mut it = args.iter();
    if let Some(first) = it.next() {
        c.arg(first);
    }
    c.arg("--config").arg(cfg);
    c.args(it);
    c.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn executed(o: &Output) -> Vec<String> {
    stdout(o)
        .lines()
        .filter(|l| l.split_whitespace().nth(1) == Some("executed"))
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect()
}

#[test]
fn validate_config_ok_and_anchored_errors() {
    let (_d, cfg) = setup(SMALL);
    let o = exec(&["validate-config"], &cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("ok ("));

    let (_d, cfg) = setup(&SMALL.replace("repeats = 2", "repeats = 0"));
    let o = exec(&["validate-config"], &cfg);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run.toml:2: repeats must be >= 1"), "{}", stderr(&o));

    let (_d, cfg) = setup(&SMALL.replace("split = 7", "split = \"seven\""));
    let o = exec(&["validate-config"], &cfg);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run.toml:5:"), "{}", stderr(&o));
}

#[test]
fn inline_secret_is_rejected() {
    let text = format!("{SMALL}{}", REMOTE.replace("api_key_env = ", "api_key = "));
    let (_d, cfg) = setup(&text);
    let o = exec(&["validate-config"], &cfg);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("api_key"), "{}", stderr(&o));
}

#[test]
fn query_before_render_is_stage_order_error() {
    let (_d, cfg) = setup(SMALL);
    let o = exec(&["run", "--stage", "query", "--offline"], &cfg);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage-order error"), "{}", stderr(&o));
}

#[test]
fn full_offline_run_is_resumable_and_deterministic() {
    let (a, cfg_a) = setup(SMALL);
    let (b, cfg_b) = setup(SMALL);
    let first = exec(&["run", "--all", "--offline"], &cfg_a);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert_eq!(executed(&first).len(), 8);
    assert!(stdout(&first).contains("remote calls: 0"));
    assert!(stdout(&first).contains("ensemble"));

    let again = exec(&["run", "--all", "--offline"], &cfg_a);
    assert_eq!(again.status.code(), Some(0));
    assert!(executed(&again).is_empty(), "{}", stdout(&again));

    let other = exec(&["run", "--all", "--offline", "--sequential"], &cfg_b);
    assert_eq!(other.status.code(), Some(0), "{}", stderr(&other));
    for f in ["manifest.json", "report/report.txt", "report/model_table.csv", "report/metrics.json"] {
        let x = fs::read(a.path().join("runs/t").join(f)).unwrap();
        let y = fs::read(b.path().join("runs/t").join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }

    fs::write(&cfg_a, format!("{SMALL}\n[report]\ndecimals = 3\n")).unwrap();
    let edited = exec(&["run", "--all", "--offline"], &cfg_a);
    assert_eq!(edited.status.code(), Some(0));
    assert_eq!(executed(&edited), vec!["report".to_string()]);

    let audit = exec(&["show-audit"], &cfg_a);
    assert_eq!(audit.status.code(), Some(0), "{}", stderr(&audit));
    assert!(stdout(&audit).contains("Preprocessing"));
    assert!(stdout(&audit).contains("Extraction"));
}

#[test]
fn seed_override_changes_split_only_downstream() {
    let (_d, cfg) = setup(SMALL);
    assert_eq!(exec(&["run", "--all", "--offline"], &cfg).status.code(), Some(0));
    let o = exec(&["run", "--all", "--offline", "--seed", "split=8"], &cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!executed(&o).contains(&"ingest".to_string()));
    assert!(executed(&o).contains(&"windows".to_string()));
    let bad = exec(&["run", "--all", "--offline", "--seed", "nope=1"], &cfg);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn offline_remote_miss_is_policy_error() {
    let (_d, cfg) = setup(&format!("{SMALL}{REMOTE}"));
    let o = exec(&["run", "--all", "--offline"], &cfg);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("offline"), "{}", stderr(&o));
}

#[test]
fn missing_credential_is_transport_class() {
    let (_d, cfg) = setup(&format!("{SMALL}{REMOTE}"));
    let o = exec(&["run", "--all"], &cfg);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("EGFR_TEST_KEY_THAT_IS_NOT_SET"), "{}", stderr(&o));
}

#[test]
fn replay_without_cache_fails() {
    let (_d, cfg) = setup(SMALL);
    for s in ["ingest", "windows", "render"] {
        assert_eq!(exec(&["run", "--stage", s, "--offline"], &cfg).status.code(), Some(0));
    }
    let o = exec(&["run", "--stage", "query", "--replay"], &cfg);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("replay"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    let o = bin().args(["run", "--all"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let (_d, cfg) = setup(SMALL);
    let o = exec(&["run", "--stage", "bogus"], &cfg);
    assert_eq!(o.status.code(), Some(1));
    assert!(bin().arg("--help").output().unwrap().status.success());
}

#[test]
fn example_config_validates() {
    let o = bin().arg("example-config").output().unwrap();
    let (_d, cfg) = setup(&stdout(&o));
    assert_eq!(exec(&["validate-config"], &cfg).status.code(), Some(0));
}
