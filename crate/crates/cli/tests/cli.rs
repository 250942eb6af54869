use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use smpc_cli::output::read_json;
use smpc_cli::ExperimentConfig;

fn bundled(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap()
}

fn small(mut cfg: ExperimentConfig, trials: usize, steps: usize) -> ExperimentConfig {
    cfg.simulation.trials = trials;
    cfg.simulation.steps = steps;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn smpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smpc")).args(args).output().unwrap()
}

fn run(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    smpc(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn zero_disturbance(cfg: &mut ExperimentConfig) {
    cfg.disturbance.covariance = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
}

#[test]
fn prs_writes_the_tightening() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &bundled("double-integrator.toml"));
    let o = run("prs", &cfg, dir.path(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&dir.path().join("prs.json")).unwrap();
    assert_eq!(doc["schema"], 1);
    let widths = doc["tightening"]["state_half_widths"].as_array().unwrap();
    assert!((widths[0].as_f64().unwrap() - 0.8561952106).abs() < 1e-8);
}

#[test]
fn zero_disturbance_tightening_leaves_the_sets_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = bundled("double-integrator.toml");
    zero_disturbance(&mut c);
    let cfg = write_config(dir.path(), "c.toml", &c);
    let o = run("prs", &cfg, dir.path(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&dir.path().join("prs.json")).unwrap();
    for key in ["state_half_widths", "input_half_widths"] {
        for w in doc["tightening"][key].as_array().unwrap() {
            assert_eq!(w.as_f64().unwrap(), 0.0);
        }
    }
    assert_eq!(doc["tightening"]["state_set"]["offsets"], serde_json::json!([1.2, 1.2]));
}

#[test]
fn over_tight_chebyshev_tightening_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = bundled("double-integrator.toml");
    c.constraints.prs = smpc_cli::config::PrsShape::Chebyshev;
    c.constraints.state_level = 0.999;
    let cfg = write_config(dir.path(), "c.toml", &c);
    let o = run("prs", &cfg, dir.path(), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("face"), "{}", stderr(&o));
    assert!(!dir.path().join("prs.json").exists());
}

#[test]
fn infeasible_initial_state_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(bundled("double-integrator.toml"), 2, 3);
    c.simulation.x0 = vec![60.0, 0.0];
    let cfg = write_config(dir.path(), "c.toml", &c);
    let o = run("simulate", &cfg, dir.path(), &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!dir.path().join("summary.json").exists());
}

#[test]
fn mismatched_compare_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let a = small(bundled("double-integrator.toml"), 2, 3);
    let mut b = small(bundled("double-integrator-c.toml"), 2, 3);
    b.disturbance.covariance[1][1] = 2.0;
    let pa = write_config(dir.path(), "a.toml", &a);
    let pb = write_config(dir.path(), "b.toml", &b);
    let o = run("compare", &pa, dir.path(), &["--config-b", pb.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn unknown_key_is_rejected_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let text = bundled("double-integrator.toml").to_toml().unwrap().replace("[simulation]\n", "[simulation]\nturbo = true\n");
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, text).unwrap();
    let o = run("simulate", &cfg, dir.path(), &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("turbo"), "{}", stderr(&o));
}

#[test]
fn dimension_mismatch_is_rejected_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = bundled("double-integrator.toml");
    c.simulation.x0 = vec![6.0];
    let cfg = write_config(dir.path(), "c.toml", &c);
    let o = run("prs", &cfg, dir.path(), &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("x0"), "{}", stderr(&o));
}

#[test]
fn zero_disturbance_from_the_origin_gives_an_all_zero_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(bundled("double-integrator.toml"), 1, 5);
    zero_disturbance(&mut c);
    c.simulation.x0 = vec![0.0, 0.0];
    let cfg = write_config(dir.path(), "c.toml", &c);
    let o = run("simulate", &cfg, dir.path(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = String::from_utf8(read(&dir.path().join("trajectories.csv"))).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[..3], ["trial", "step", "mode"]);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), header.len());
        for (name, v) in header.iter().zip(&fields).skip(3) {
            if name.starts_with("violated") {
                assert_eq!(*v, "0", "{row}");
            } else {
                assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{name} in {row}");
            }
        }
    }
}

#[test]
fn runs_are_byte_identical_across_threads_and_output_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &small(bundled("double-integrator.toml"), 16, 6));
    let one = dir.path().join("one");
    let three = dir.path().join("nested/three");
    assert_eq!(code(&run("simulate", &cfg, &one, &["--threads", "1"])), 0);
    assert_eq!(code(&run("simulate", &cfg, &three, &["--threads", "3"])), 0);
    for f in ["trajectories.csv", "bands.csv", "summary.json"] {
        assert_eq!(read(&one.join(f)), read(&three.join(f)), "{f}");
    }
}

#[test]
fn seed_override_changes_the_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &small(bundled("double-integrator.toml"), 8, 4));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run("simulate", &cfg, &a, &[])), 0);
    assert_eq!(code(&run("simulate", &cfg, &b, &["--seed", "2"])), 0);
    assert_ne!(read(&a.join("trajectories.csv")), read(&b.join("trajectories.csv")));
    let doc = read_json(&b.join("summary.json")).unwrap();
    assert_eq!(doc["config"]["simulation"]["seed"], 2);
}

#[test]
fn comparing_a_config_with_itself_gives_zero_difference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &small(bundled("double-integrator.toml"), 20, 8));
    let o = run("compare", &cfg, dir.path(), &["--config-b", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&dir.path().join("compare.json")).unwrap();
    assert_eq!(doc["state_joint_difference"], 0.0);
    assert_eq!(doc["a"], doc["b"]);
    let a = read(&dir.path().join("trajectories_a.csv"));
    assert_eq!(a, read(&dir.path().join("trajectories_b.csv")));
}

#[test]
fn without_disturbances_both_controllers_coincide() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = small(bundled("double-integrator.toml"), 3, 8);
    let mut b = small(bundled("double-integrator-c.toml"), 3, 8);
    zero_disturbance(&mut a);
    zero_disturbance(&mut b);
    let pa = write_config(dir.path(), "a.toml", &a);
    let pb = write_config(dir.path(), "b.toml", &b);
    let o = run("compare", &pa, dir.path(), &["--config-b", pb.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&dir.path().join("compare.json")).unwrap();
    assert_eq!(doc["a"]["mode1_fraction"], 1.0);
    assert_eq!(doc["b"]["mode1_fraction"], 1.0);
    // x1, x2, u columns.
    let states = |name: &str| -> Vec<String> {
        let text = String::from_utf8(read(&dir.path().join(name))).unwrap();
        text.lines().skip(1).map(|l| l.split(',').skip(3).take(3).collect::<Vec<_>>().join(",")).collect()
    };
    let a = states("trajectories_a.csv");
    assert_eq!(a.len(), 3 * 8);
    assert_eq!(a, states("trajectories_b.csv"));
}

#[test]
fn echoed_config_round_trips_and_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let original = small(bundled("double-integrator.toml"), 10, 5);
    let cfg = write_config(dir.path(), "c.toml", &original);
    let first = dir.path().join("first");
    assert_eq!(code(&run("simulate", &cfg, &first, &[])), 0);
    let doc = read_json(&first.join("summary.json")).unwrap();
    let echoed: ExperimentConfig = serde_json::from_value(doc["config"].clone()).unwrap();
    assert_eq!(echoed, original);

    let again = write_config(dir.path(), "again.toml", &echoed);
    let second = dir.path().join("second");
    assert_eq!(code(&run("simulate", &again, &second, &[])), 0);
    assert_eq!(read(&first.join("summary.json")), read(&second.join("summary.json")));
    assert_eq!(read(&first.join("trajectories.csv")), read(&second.join("trajectories.csv")));
}

#[test]
fn every_json_artifact_carries_the_schema_version() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &small(bundled("double-integrator.toml"), 4, 3));
    assert_eq!(code(&run("prs", &cfg, dir.path(), &[])), 0);
    assert_eq!(code(&run("simulate", &cfg, dir.path(), &[])), 0);
    for (f, kind) in [("prs.json", "prs"), ("summary.json", "simulate")] {
        let doc: Value = serde_json::from_slice(&read(&dir.path().join(f))).unwrap();
        assert_eq!(doc["schema"], 1, "{f}");
        assert_eq!(doc["kind"], kind, "{f}");
    }
}

#[test]
fn validate_passes_without_disturbances_with_unit_rates() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(bundled("double-integrator.toml"), 20, 10);
    zero_disturbance(&mut c);
    c.simulation.validation_samples = 1000;
    let cfg = write_config(dir.path(), "c.toml", &c);
    let o = run("validate", &cfg, dir.path(), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let doc = read_json(&dir.path().join("validation.json")).unwrap();
    // Shift dominance draws its own random covariances; every other check
    // sees the disturbance-free loop.
    let checks = doc["checks"].as_array().unwrap();
    assert!(checks.len() > 1);
    for check in checks.iter().filter(|c| !c["name"].as_str().unwrap().starts_with("shift")) {
        assert_eq!(check["observed"], 1.0, "{check}");
    }
}

#[test]
fn shrunken_prs_fails_validation_with_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(bundled("double-integrator.toml"), 300, 10);
    c.simulation.validation_samples = 2000;
    c.simulation.validation_prs_scale = 0.5;
    let cfg = write_config(dir.path(), "c.toml", &c);
    let o = run("validate", &cfg, dir.path(), &[]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stdout));
    let doc = read_json(&dir.path().join("validation.json")).unwrap();
    assert_eq!(doc["passed"], false);
    let failed: Vec<&Value> = doc["checks"].as_array().unwrap().iter().filter(|c| c["passed"] == false).collect();
    assert!(failed.iter().any(|c| c["name"].as_str().unwrap().contains("closed-loop")), "{failed:?}");
}
