//! The `slowfast` binary: subcommands, exit codes, thread variable.

use std::path::Path;
use std::process::{Command, Output};

fn slowfast(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_slowfast"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("SLOWFAST_THREADS", t),
        None => cmd.env_remove("SLOWFAST_THREADS"),
    };
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = r#"
experiment = "averaging-convergence"
eps_grid = [0.1, 0.01]
n_paths = 200
step = 0.01
seed = 4
output_dir = "out"

[system]
builtin = "ou-benchmark"

[metric]
replicates = 20
"#;

#[test]
fn list_shows_every_builtin() {
    let out = slowfast(&["list"], None);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["rotator", "ou-benchmark", "constant-shift", "radial-noise", "anharmonic-drift", "duffing-chain"] {
        assert!(text.contains(name), "{name} missing from\n{text}");
    }
}

#[test]
fn validate_accepts_shipped_scenarios() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        // the chain needs a profile produced by another scenario
        if p.extension().is_some_and(|e| e == "toml") && !p.ends_with("duffing_chain.toml") {
            let out = slowfast(&["validate", p.to_str().unwrap()], None);
            assert!(out.status.success(), "{}: {}", p.display(), String::from_utf8_lossy(&out.stderr));
        }
    }
}

#[test]
fn bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "a.toml", &SMALL.replace("seed = 4", "seed = 4\nsede = 5"));
    let builtin = write_config(dir.path(), "b.toml", &SMALL.replace("ou-benchmark", "pendulum"));
    for p in [unknown, builtin, dir.path().join("missing.toml").to_string_lossy().into_owned()] {
        let out = slowfast(&["validate", &p], None);
        assert_eq!(out.status.code(), Some(2), "{p}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn run_writes_outputs_and_honours_thread_variable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = slowfast(&["run", &cfg], Some("2"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let outdir = dir.path().join("out");
    for f in ["report.json", "distances.csv", "timing.json", "series/mean_actions.csv"] {
        assert!(outdir.join(f).exists(), "{f} missing");
    }
    let timing: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(outdir.join("timing.json")).unwrap()).unwrap();
    assert_eq!(timing["threads"], 2);
    let first = std::fs::read(outdir.join("distances.csv")).unwrap();

    let out = slowfast(&["run", &cfg], Some("1"));
    assert!(out.status.success());
    assert_eq!(std::fs::read(outdir.join("distances.csv")).unwrap(), first);

    let out = slowfast(&["run", &cfg], Some("zero"));
    assert_eq!(out.status.code(), Some(2));
}
