use std::path::Path;
use std::process::{Command, Output};

fn routelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_routelab")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A shrunken default config so the full chain runs in seconds.
fn write_config(dir: &Path) -> String {
    let out = routelab(&["show-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout)
        .unwrap()
        .replace("tasks = 400", "tasks = 40")
        .replace("tasks = 200", "tasks = 30")
        .replace("iterations = 3000", "iterations = 5")
        .replace("sft_steps = 3000", "sft_steps = 100");
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_chain_succeeds_and_lists_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = out_dir.to_str().unwrap();
    let steps: [&[&str]; 6] = [
        &["profile"],
        &["synthesize"],
        &["train", "--stage", "sft"],
        &["train", "--stage", "bopo"],
        &["eval", "--mode", "frontier"],
        &["eval", "--mode", "hard_budget"],
    ];
    for step in steps {
        let mut args = vec!["--config", &cfg, "--out", out, "--seed", "9"];
        args.extend_from_slice(step);
        let o = routelab(&args);
        assert!(o.status.success(), "{step:?}: {}", stderr(&o));
        assert!(!o.stdout.is_empty());
    }
    let o = routelab(&["--config", &cfg, "--out", out, "--seed", "9", "eval", "--mode", "allocation"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out_dir.join("reports/allocation.csv").exists());
    assert_eq!(std::fs::read_dir(out_dir.join("checkpoints")).unwrap().count(), 6);
}

#[test]
fn failures_exit_nonzero_with_one_error_class_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let o = routelab(&["--out", out.to_str().unwrap(), "synthesize"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error class=missing_input:"), "{err}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = \"x\"\n").unwrap();
    let o = routelab(&["--config", bad.to_str().unwrap(), "profile"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error class=parse_error:"));

    let o = routelab(&["--config", dir.path().join("nope.toml").to_str().unwrap(), "profile"]);
    assert!(stderr(&o).starts_with("error class=io_error:"));
}

#[test]
fn bad_arguments_are_usage_errors() {
    let o = routelab(&["eval", "--mode", "sideways"]);
    assert!(!o.status.success());
    let o = routelab(&["train"]);
    assert!(!o.status.success());
}
