use std::path::Path;
use std::process::Command;

use gansde_cli::config::{ExperimentParams, InitialSpec};
use gansde_cli::{parse_config_str, run_experiment, ExperimentKind, Status};
use gansde_core::Scheme;

fn parse(text: &str) -> Result<gansde_cli::ExperimentConfig, gansde_cli::ConfigError> {
    parse_config_str(text, None, None, Path::new("."))
}

fn violations(text: &str) -> Vec<String> {
    parse(text).expect_err("config should be rejected").violations
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gansde"))
}

const LIN: &str = r#"
[model]
kind = "lin-wgan"

[dataset]
z = [1.0, 3.0]
x = [2.0, 0.0]
"#;

const QUAD: &str = r#"
[model]
kind = "quad-sim"
a = 1.0
c = 1.0
b = 0.0
s = 1.0
"#;

#[test]
fn minimal_simulate_sga_gets_defaults() {
    let cfg = parse(&format!("experiment = \"simulate-sga\"\n{LIN}\n[simulate-sga]\neta = 0.1\nsteps = 10\n")).unwrap();
    assert_eq!(cfg.seed, 0);
    assert!(cfg.out.is_none());
    let ExperimentParams::SimulateSga(p) = cfg.params else { panic!("wrong params") };
    assert_eq!(p.scheme, Scheme::Alt);
    assert_eq!((p.batch_size, p.replicas, p.record_every), (1, 1, 1));
    assert_eq!(p.initial, InitialSpec { theta: vec![0.0], omega: vec![0.0], std: None });
}

#[test]
fn negative_eta_names_the_key_and_constraint() {
    let v = violations(&format!("experiment = \"simulate-sga\"\n{LIN}\n[simulate-sga]\neta = -0.1\nsteps = 10\n"));
    assert_eq!(v.len(), 1, "{v:?}");
    assert!(v[0].contains("simulate-sga.eta") && v[0].contains("eta > 0"), "{v:?}");
}

#[test]
fn eta_grid_must_decrease() {
    let v = violations(&format!("experiment = \"weak-error\"\n{LIN}\n[weak-error]\neta_grid = [0.1, 0.2, 0.05]\n"));
    assert!(v.iter().any(|m| m.contains("eta_grid") && m.contains("strictly decreasing")), "{v:?}");
}

#[test]
fn unknown_keys_are_rejected_everywhere() {
    let v = violations(&format!(
        "experiment = \"simulate-sga\"\ncolour = 1\n{LIN}\nlayers = 3\n[simulate-sga]\neta = 0.1\nsteps = 10\nmomentum = 0.9\n"
    ));
    for key in ["colour", "dataset.layers", "simulate-sga.momentum"] {
        assert!(v.iter().any(|m| m.starts_with(key) && m.contains("unknown key")), "{key}: {v:?}");
    }
}

#[test]
fn all_violations_are_reported_together() {
    let v = violations(
        "experiment = \"schedule-demo\"\n[model]\nkind = \"quad-sim\"\na = -1.0\n[schedule-demo]\neta = 1.5\ndelta = 1.0\nbatch_size = 1\n",
    );
    for needle in ["model.a", "schedule-demo.eta", "schedule-demo.delta", "schedule-demo.batch_size", "schedule-demo.steps"] {
        assert!(v.iter().any(|m| m.starts_with(needle)), "{needle}: {v:?}");
    }
}

#[test]
fn single_start_experiments_refuse_random_initialisation() {
    let v = violations(&format!(
        "experiment = \"weak-error\"\n{LIN}\n[weak-error]\neta_grid = [0.2, 0.1]\ninit_std = 0.1\n"
    ));
    assert!(v.iter().any(|m| m.starts_with("weak-error.init_std")), "{v:?}");
}

#[test]
fn subcommand_must_match_the_config() {
    let text = format!("experiment = \"simulate-sga\"\n{LIN}\n[simulate-sga]\neta = 0.1\nsteps = 10\n");
    let err = parse_config_str(&text, Some(ExperimentKind::WeakError), None, Path::new(".")).unwrap_err();
    assert!(err.violations.iter().any(|m| m.starts_with("experiment")));
}

#[test]
fn missing_dataset_file_is_an_error() {
    let v = violations(
        "experiment = \"simulate-sga\"\n[model]\nkind = \"lin-wgan\"\n[dataset]\npath = \"no/such/file.csv\"\n[simulate-sga]\neta = 0.1\nsteps = 10\n",
    );
    assert!(v.iter().any(|m| m.starts_with("dataset.path") && m.contains("cannot open")), "{v:?}");
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn validate_only_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("experiment = \"simulate-sga\"\n{LIN}\n[simulate-sga]\neta = 0.1\nsteps = 10\n"));
    let out = dir.path().join("out");
    let st = bin().args(["simulate-sga", "--validate-only", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(0));
    assert!(!out.exists());
}

#[test]
fn invalid_config_exits_one_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("experiment = \"simulate-sga\"\n{LIN}\n[simulate-sga]\neta = -0.1\nsteps = 10\n"));
    let o = bin().args(["simulate-sga", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("simulate-sga.eta"));
}

#[test]
fn weak_error_oracle_run_passes_its_slope_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            "experiment = \"weak-error\"\n{LIN}\n[weak-error]\nscheme = \"ALT\"\neta_grid = [0.2, 0.1, 0.05, 0.025]\nexpected_slope = [1.7, 2.3]\ntheta = [1.0]\nomega = [1.0]\n"
        ),
    );
    let out = dir.path().join("run");
    let o = bin().args(["weak-error", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("order_study.csv")).unwrap();
    assert!(csv.starts_with("eta,test_function,error,se"));
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("verdict: PASS"), "{summary}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("order_study.json")).unwrap()).unwrap();
    let slope = json["slope"].as_f64().unwrap();
    assert!((1.7..=2.3).contains(&slope), "{slope}");
}

#[test]
fn stationary_fdr_writes_residuals_and_verdict() {
    let text = format!(
        "experiment = \"stationary-fdr\"\nseed = 3\n{QUAD}\n[stationary-fdr]\neta = 0.1\nbatch_size = 4\nhorizon = 100.0\nreplicas = 32\ninner_step = 0.01\ntheta = [1.0]\nomega = [1.0]\n"
    );
    let cfg = parse(&text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(outcome.status, Status::Ok);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("fdr.json")).unwrap()).unwrap();
    for key in ["fdr1", "fdr2"] {
        let r = &json[key];
        let (res, se) = (r["residual"].as_f64().unwrap(), r["se"].as_f64().unwrap());
        assert_eq!(r["verdict"].as_bool().unwrap(), res.abs() <= r["tolerance"].as_f64().unwrap());
        assert!(se > 0.0);
    }
    assert_eq!(json["verdict"].as_bool(), Some(true), "{json}");
    assert!(json["measure"]["samples"].as_u64().unwrap() > 0);
}

#[test]
fn manifest_echo_reproduces_the_run() {
    let text = format!(
        "experiment = \"simulate-sde\"\nseed = 9\n{QUAD}\n[simulate-sde]\nkind = \"alt-sde\"\neta = 0.1\nbatch_size = 2\nhorizon = 2.0\nreplicas = 2\n"
    );
    let first = tempfile::tempdir().unwrap();
    run_experiment(&parse(&text).unwrap(), first.path()).unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(first.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"].as_u64(), Some(9));
    assert_eq!(manifest["experiment"].as_str(), Some("simulate-sde"));

    let echoed = std::fs::read_to_string(first.path().join("config.toml")).unwrap();
    let second = tempfile::tempdir().unwrap();
    run_experiment(&parse(&echoed).unwrap(), second.path()).unwrap();
    for name in ["trajectory_r0000.csv", "trajectory_r0001.csv", "config.toml", "manifest.json", "summary.txt"] {
        assert_eq!(
            std::fs::read(first.path().join(name)).unwrap(),
            std::fs::read(second.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn seed_flag_overrides_and_changes_output() {
    let text = format!("experiment = \"simulate-sga\"\nseed = 1\n{QUAD}\n[simulate-sga]\neta = 0.1\nbatch_size = 2\nsteps = 50\n");
    let a = parse_config_str(&text, None, Some(2), Path::new(".")).unwrap();
    assert_eq!(a.seed, 2);
    let b = parse(&text).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&a, da.path()).unwrap();
    run_experiment(&b, db.path()).unwrap();
    assert_ne!(
        std::fs::read(da.path().join("trajectory.csv")).unwrap(),
        std::fs::read(db.path().join("trajectory.csv")).unwrap()
    );
}

#[test]
fn underpowered_monte_carlo_study_is_inconclusive() {
    let text = format!(
        "experiment = \"weak-error\"\n{QUAD}\n[weak-error]\nscheme = \"SML\"\nmode = \"monte-carlo\"\neta_grid = [0.2, 0.1]\nreplicas = 4\nbatch_size = 2\ntheta = [1.0]\nomega = [1.0]\n"
    );
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&parse(&text).unwrap(), dir.path()).unwrap();
    assert_eq!(outcome.status, Status::Inconclusive);
    assert_eq!(outcome.status.exit_code(), 2);
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn writes_stay_inside_the_output_directory() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("nested/out");
    let text = format!("experiment = \"condition-check\"\n{QUAD}\n[condition-check]\neta = 0.1\nbatch_size = 4\nprobes = 200\n");
    run_experiment(&parse(&text).unwrap(), &out).unwrap();
    let top: Vec<_> = std::fs::read_dir(root.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(top, vec![std::ffi::OsString::from("nested")]);
    assert!(out.join("conditions.json").exists());
}
