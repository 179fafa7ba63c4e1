//! End-to-end runs of the `mfclear` binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mfclear"));
    c.env_remove("MFCLEAR_OUT_DIR");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write(dir: &Path, name: &str, json: serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json.to_string()).unwrap();
    p
}

fn lq_model() -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(configs().join("model_lq.json")).unwrap()).unwrap()
}

#[test]
fn every_command_runs_on_the_shipped_configs() {
    let out = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str, &str); 8] = [
        (&["validate"], "validate.json", "validate-assumptions.json"),
        (&["solve-lattice"], "solve_lattice.json", "solve-lattice-phi.csv"),
        (&["solve-newton"], "solve_newton.json", "solve-newton-Y.csv"),
        (&["solve-mkv"], "solve_mkv.json", "solve-mkv-phi_mfg.csv"),
        (&["lq-oracle"], "lq_oracle.json", "lq-oracle-riccati.csv"),
        (&["experiment", "convergence"], "convergence.json", "experiment-convergence-seed2024-rate.csv"),
        (&["experiment", "stability"], "stability.json", "experiment-stability-stability.csv"),
        (&["experiment", "clearing"], "clearing.json", "experiment-clearing-clearing.csv"),
    ];
    for (cmd, cfg, expect) in cases {
        let st = bin()
            .args(cmd)
            .arg("--config")
            .arg(configs().join(cfg))
            .arg("--out")
            .arg(out.path())
            .output()
            .unwrap();
        assert!(st.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&st.stderr));
        assert!(out.path().join(expect).exists(), "{cmd:?} did not write {expect}");
        let printed = String::from_utf8(st.stdout).unwrap();
        assert!(printed.lines().any(|l| l.ends_with("manifest.json")));
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        serde_json::json!({
            "convergence": {
                "params": {"gamma_f": 1.0, "gamma_g": 1.0, "gamma_l": 1.0, "lambda": 1.0, "s0": 1.0, "horizon": 1.0},
                "family": "two_point", "grid": [10, 100, 1000], "paths": 300, "steps": 5,
                "gap_params": {"gamma_f": 1.0, "gamma_g": 1.0, "gamma_l": 1.0, "lambda": 1.0, "sigma": 1.0, "s0": 1.0, "horizon": 1.0},
                "gap_grid": [10, 100, 1000], "gap_paths": 2000
            }
        }),
    );
    let run = |out: &str| {
        let st = bin()
            .args(["experiment", "convergence", "--seed", "9", "--threads", "2", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(out))
            .output()
            .unwrap();
        assert!(st.status.success());
    };
    run("a");
    run("b");
    for f in ["experiment-convergence-seed9-rate.json", "experiment-convergence-seed9-rate.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn randomized_experiment_without_seed_is_a_config_error() {
    let st = bin()
        .args(["experiment", "convergence", "--config"])
        .arg(configs().join("stability.json"))
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));
}

#[test]
fn unknown_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", serde_json::json!({"model": lq_model(), "lattice": {"steps": 1}, "tolerance": 1}));
    let st = bin().args(["solve-lattice", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&st.stderr).contains("tolerance"));
}

#[test]
fn node_cap_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", serde_json::json!({"model": lq_model(), "lattice": {"steps": 4, "max_nodes": 100}}));
    let st = bin().args(["solve-lattice", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap().status;
    assert_eq!(st.code(), Some(3));
}

#[test]
fn non_convergence_exits_one_with_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        serde_json::json!({"model": lq_model(), "lattice": {"steps": 2}, "solver": {"max_iters": 2}}),
    );
    let st = bin().args(["solve-lattice", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap().status;
    assert_eq!(st.code(), Some(1));
    assert!(dir.path().join("solve-lattice-residual_history.csv").exists());
    assert!(dir.path().join("solve-lattice-manifest.json").exists());
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        serde_json::json!({"lq": {"params": {"gamma_f": 1.0, "gamma_g": 1.0, "gamma_l": 1.0, "lambda": 1.0, "horizon": 1.0}, "steps": 4},
                           "output_dir": dir.path().join("from_config")}),
    );
    let file = "lq-oracle-riccati.csv";
    let run = |env: Option<&Path>, out: Option<&Path>| {
        let mut c = bin();
        c.args(["lq-oracle", "--config"]).arg(&cfg);
        if let Some(e) = env {
            c.env("MFCLEAR_OUT_DIR", e);
        }
        if let Some(o) = out {
            c.arg("--out").arg(o);
        }
        assert!(c.output().unwrap().status.success());
    };
    run(None, None);
    assert!(dir.path().join("from_config").join(file).exists());
    run(Some(&dir.path().join("from_env")), None);
    assert!(dir.path().join("from_env").join(file).exists());
    run(Some(&dir.path().join("env2")), Some(&dir.path().join("from_flag")));
    assert!(dir.path().join("from_flag").join(file).exists());
    assert!(!dir.path().join("env2").exists());
}

#[test]
fn model_file_resolves_against_the_config_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.json"), lq_model().to_string()).unwrap();
    let cfg = write(dir.path(), "c.json", serde_json::json!({"model_file": "m.json"}));
    let st = bin().args(["validate", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap().status;
    assert!(st.success());
}

#[test]
fn help_documents_the_config_schema() {
    let out = bin().arg("--help").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("model_file") && text.contains("Exit codes"));
}

#[test]
fn lq_oracle_simulation_needs_a_seed_and_writes_the_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("lq_oracle.json")).unwrap()).unwrap();
    doc["lq"]["simulation"] = serde_json::json!({ "agents": 10, "steps": 4, "paths": 50, "record_steps": [0, 2, 4] });
    let cfg = write(dir.path(), "c.json", doc);
    let st = bin().args(["lq-oracle", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    let st = bin()
        .args(["lq-oracle", "--seed", "5", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let text = std::fs::read_to_string(dir.path().join("lq-oracle-seed5-ensemble.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 50 * 3);
    assert!(text.starts_with("path,step,t,phi_ho,phi_mfg,xbar_n,xbar_mfg\n"));
}
