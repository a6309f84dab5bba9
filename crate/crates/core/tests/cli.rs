use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn srct(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srct"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn popgen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = srct(&["popgen", "-n", "25", "--seed", "3", "--out", "a.jsonl"], dir.path());
    let b = srct(&["popgen", "-n", "25", "--seed", "3", "--out", "b.jsonl"], dir.path());
    let c = srct(&["popgen", "-n", "25", "--seed", "4", "--out", "c.jsonl"], dir.path());
    assert_eq!((code(&a), code(&b), code(&c)), (0, 0, 0));
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
    assert_eq!(String::from_utf8(read("a.jsonl")).unwrap().lines().count(), 25);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&srct(&["popgen", "-n", "0"], dir.path())), 2);
    assert_eq!(code(&srct(&["run", "study3", "--mock"], dir.path())), 2);
    assert_eq!(code(&srct(&["run", "study3", "--seed", "1"], dir.path())), 2);
    assert_eq!(code(&srct(&["replicate", "study9", "--mock"], dir.path())), 2);
    assert_eq!(code(&srct(&["frobnicate"], dir.path())), 2);
}

#[test]
fn unknown_spec_is_a_config_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = srct(&["plan", "no-such-spec", "--seed", "1"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no-such-spec"));
}

#[test]
fn missing_credential_fails_before_dispatch() {
    let dir = tempfile::tempdir().unwrap();
    let mut table = String::new();
    for i in 1..=9 {
        table.push_str(&format!(
            "[[providers]]\nid = \"mock-{i:02}\"\nfamily = \"openai-chat\"\nbase_url = \"http://127.0.0.1:9\"\nmodel = \"m{i}\"\nauth_env = \"SRCT_CLI_TEST_NO_SUCH_KEY\"\n\n"
        ));
    }
    fs::write(dir.path().join("providers.toml"), table).unwrap();
    let o = srct(
        &["run", "study3", "--seed", "1", "--providers", "providers.toml", "--out", "run"],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("SRCT_CLI_TEST_NO_SUCH_KEY"));
    assert!(!dir.path().join("run/transcripts.jsonl").exists());
}

#[test]
fn staged_commands_match_replicate() {
    let dir = tempfile::tempdir().unwrap();
    let p = |args: &[&str]| code(&srct(args, dir.path()));
    assert_eq!(p(&["plan", "study3", "--seed", "9", "--out", "staged"]), 0);
    assert_eq!(p(&["run", "study3", "--seed", "9", "--mock", "--out", "staged"]), 0);
    assert_eq!(p(&["extract", "staged"]), 0);
    assert_eq!(p(&["analyze", "staged", "--bootstrap-reps", "200"]), 0);
    assert_eq!(p(&["report", "staged"]), 0);
    assert_eq!(p(&["replicate", "study3", "--seed", "9", "--mock", "--bootstrap-reps", "200", "--out", "whole"]), 0);
    for name in ["plans.jsonl", "transcripts.jsonl", "responses.jsonl", "effects.csv", "analysis.json", "report.md"] {
        let a = fs::read(dir.path().join("staged").join(name)).unwrap();
        let b = fs::read(dir.path().join("whole").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn invalid_responses_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = srct(&["run", "study1", "--seed", "2", "--mock", "--out", "r"], dir.path());
    assert_eq!(code(&o), 3);
    assert_eq!(code(&srct(&["extract", "r"], dir.path())), 3);
    assert_eq!(code(&srct(&["extract", "missing"], dir.path())), 1);
}

#[test]
fn run_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&srct(&["replicate", "study3", "--mock", "--seed", "6", "--out", "a"], dir.path())), 0);
    let o = srct(&["run", "--from-manifest", "a/manifest.json", "--out", "b"], dir.path());
    assert!(matches!(code(&o), 0 | 3), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["transcripts.jsonl", "effects.csv"] {
        assert_eq!(fs::read(dir.path().join("a").join(name)).unwrap(), fs::read(dir.path().join("b").join(name)).unwrap());
    }
}
