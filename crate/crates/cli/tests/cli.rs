use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fedbatch");

fn run(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut c = Command::new(BIN);
    c.args(args)
        .env_remove("FEDBATCH_OUT")
        .env("RUST_LOG", "warn");
    if let Some(p) = env_out {
        c.env("FEDBATCH_OUT", p);
    }
    c.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

const TINY_TRAIN: &str = r#"
[train.sanodep]
n_l = 2
n_d = 2
r_dim = 4
encoder_widths = [8]
init_widths = [8]
ode_widths = [8]
decoder_widths = [8]
ode_steps = 5
steps = 2

[train.sanodep.episodes]
n_sys = 2
n_x0 = 6
n_grid = 20
"#;

#[test]
fn simulate_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["simulate", "--out", out], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&dir.path().join("simulate.csv")).len(), 151);
    assert!(dir.path().join("simulate.svg").exists());
}

#[test]
fn no_feed_keeps_volume_constant() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(
        &["simulate", "--out", out, "--recipe", "1.5,0,0,7,0,150"],
        None,
    );
    assert_eq!(code(&o), 0);
    let rows = csv_rows(&dir.path().join("simulate.csv"));
    assert!(rows.iter().all(|r| r[2] == 0.0 && r[4] == 7.0));
}

#[test]
fn env_var_sets_output_dir_and_flag_wins() {
    let (env_dir, flag_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(code(&run(&["simulate"], Some(env_dir.path()))), 0);
    assert!(env_dir.path().join("simulate.csv").exists());
    let o = run(
        &["simulate", "--out", flag_dir.path().to_str().unwrap()],
        Some(env_dir.path()),
    );
    assert_eq!(code(&o), 0);
    assert!(flag_dir.path().join("simulate.csv").exists());
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&run(&["simulate", "--bogus"], None)), 3);
    assert_eq!(
        code(&run(&["simulate", "--out", out, "--recipe", "1,2"], None)),
        3
    );
    let cfg = write_config(dir.path(), "nonsense = true\n");
    assert_eq!(
        code(&run(&["simulate", "--out", out, "--config", &cfg], None)),
        3
    );
    let cfg = write_config(dir.path(), "[strategy]\nbaseline_budget = 0\n");
    assert_eq!(
        code(&run(&["benchmark", "--out", out, "--config", &cfg], None)),
        3
    );
    assert_eq!(
        code(&run(&["simulate", "--config", "/nonexistent/x.toml"], None)),
        3
    );
    assert_eq!(code(&run(&["--help"], None)), 0);
}

#[test]
fn diverged_simulation_is_partial() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(dir.path(), "[plant.solver]\ndivergence_cap = 20.0\n");
    let o = run(&["simulate", "--out", out, "--config", &cfg], None);
    assert_eq!(code(&o), 2);
    let rows = csv_rows(&dir.path().join("simulate.csv"));
    assert!(!rows.is_empty() && rows.len() < 151);
}

#[test]
fn non_finite_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(
        dir.path(),
        &TINY_TRAIN.replace("steps = 2", "steps = 20\nlearning_rate = 1e300"),
    );
    let o = run(
        &["train", "--out", out, "--config", &cfg, "--jobs", "1"],
        None,
    );
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_then_mse_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{TINY_TRAIN}\n[mse_sweep]\ndistributions = [\"on_task\"]\ntasks_per_distribution = 1\ntrajectories = 2\nn_samples = 4\n"),
    );
    let o = run(
        &["train", "--out", out, "--config", &cfg, "--seed", "3"],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("sanodep.ckpt").exists());
    assert_eq!(
        fs::read_to_string(dir.path().join("train_log.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    let o = run(&["mse-sweep", "--out", out, "--config", &cfg], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(dir.path().join("mse.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    // Resuming under a different seed is refused.
    assert_eq!(
        code(&run(
            &["train", "--out", out, "--config", &cfg, "--seed", "4"],
            None
        )),
        3
    );
}
