//! Black-box tests of the command-line interface.

use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cbf-stl"))
}

fn run_ok(args: &[&str]) {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        run_ok(&[
            "run",
            "--preset",
            "fig1",
            "--seed",
            "3",
            "--vf-cache",
            cache.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    let t1 = fs::read(out1.join("trace.csv")).unwrap();
    let t2 = fs::read(out2.join("trace.csv")).unwrap();
    assert!(!t1.is_empty());
    assert_eq!(t1, t2, "identical config + seed must give identical traces");
}

#[test]
fn vf_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let out = dir.path().join("out");
    run_ok(&[
        "solve-vf",
        "--preset",
        "fig1",
        "--vf-cache",
        cache.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let cached: Vec<_> = fs::read_dir(&cache).unwrap().collect();
    assert!(!cached.is_empty(), "solve-vf must populate the cache");
    // A subsequent run with the same cache succeeds and emits artifacts.
    run_ok(&[
        "run",
        "--preset",
        "fig1",
        "--vf-cache",
        cache.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    for name in ["trace.csv", "summary.txt", "plot_state.csv", "plot_params.csv"] {
        assert!(out.join(name).is_file(), "missing artifact {name}");
    }
}

#[test]
fn robustness_subcommand_reads_back_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    run_ok(&["run", "--preset", "fig1", "--out", out.to_str().unwrap()]);
    let trace = out.join("trace.csv");
    run_ok(&[
        "robustness",
        "--preset",
        "fig1",
        "--trace",
        trace.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
}

#[test]
fn explain_accepts_a_custom_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.toml");
    fs::write(
        &cfg,
        r#"
name = "hold"
formula = "G[0,2] p"
x0 = 1.0

[dynamics]
family = "Linear"

[predicates.p]
c = 10.0
r = 0.25
x0 = 1.0
"#,
    )
    .unwrap();
    run_ok(&[
        "explain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
}

#[test]
fn malformed_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();

    // Broken formula grammar inside an otherwise valid config.
    let bad_formula = dir.path().join("bad_formula.toml");
    fs::write(
        &bad_formula,
        "name = \"x\"\nformula = \"G[0,\"\nx0 = 0.0\n\n[dynamics]\nfamily = \"Linear\"\n\n[predicates.p]\nc = 1.0\nr = 1.0\nx0 = 0.0\n",
    )
    .unwrap();
    let st = bin()
        .args(["run", "--config", bad_formula.to_str().unwrap()])
        .arg("--out")
        .arg(dir.path().join("o1"))
        .status()
        .unwrap();
    assert!(!st.success());

    // Broken TOML.
    let bad_toml = dir.path().join("bad.toml");
    fs::write(&bad_toml, "name = 3\n[[predicates\n").unwrap();
    let st = bin()
        .args(["explain", "--config", bad_toml.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(!st.success());

    // Unknown preset and missing source.
    assert!(!bin().args(["run", "--preset", "nosuch"]).status().unwrap().success());
    assert!(!bin().args(["run"]).status().unwrap().success());
}
