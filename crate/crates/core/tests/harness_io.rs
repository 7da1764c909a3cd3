use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fedbatch::campaign::StrategyKind;
use fedbatch::exec::Execution;
use fedbatch::harness::{
    cmd_benchmark, cmd_simulate, cmd_train, HarnessConfig, HarnessError, TRAIN_LOG_FILE,
};
use fedbatch::sanodep::SanodepConfig;
use fedbatch::tasking::EpisodeConfig;

fn small_benchmark() -> HarnessConfig {
    let mut cfg = HarnessConfig {
        seeds: vec![0, 1],
        ..HarnessConfig::default()
    };
    cfg.benchmark.strategies = vec![
        StrategyKind::GpStandard,
        StrategyKind::GpExp,
        StrategyKind::RandomSearch,
    ];
    cfg.benchmark.tasks_per_distribution = 2;
    cfg.strategy.baseline_budget = 6;
    cfg.strategy.lhs_size = 3;
    cfg.strategy.acquisition_budget = 64;
    cfg.strategy.oracle_budget = 8;
    cfg.strategy.gp_fit.restarts = 2;
    cfg.strategy.gp_fit.steps = 40;
    cfg
}

fn tiny_train() -> HarnessConfig {
    let mut cfg = HarnessConfig::default();
    cfg.train.sanodep = SanodepConfig {
        n_l: 2,
        n_d: 2,
        r_dim: 4,
        encoder_widths: vec![8],
        init_widths: vec![8],
        ode_widths: vec![8],
        decoder_widths: vec![8],
        ode_steps: 5,
        steps: 4,
        checkpoint_every: 2,
        episodes: EpisodeConfig {
            n_sys: 2,
            n_x0: 6,
            n_grid: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg
}

fn read_dir_sorted(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in walk(dir) {
        let rel = e.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        out.insert(rel, fs::read(&e).unwrap());
    }
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            v.extend(walk(&p));
        } else {
            v.push(p);
        }
    }
    v
}

#[test]
fn simulate_writes_full_grid_and_replays() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = HarnessConfig::default();
    let pa = cmd_simulate(&cfg, a.path()).unwrap();
    cmd_simulate(&cfg, b.path()).unwrap();
    let text = fs::read_to_string(&pa).unwrap();
    assert_eq!(text.lines().count(), cfg.simulate.n_grid + 1);
    assert_eq!(text.lines().next().unwrap(), "t,B,P,S,V");
    assert_eq!(read_dir_sorted(a.path()), read_dir_sorted(b.path()));
}

#[test]
fn benchmark_outputs_replay_and_aggregate_is_recomputable() {
    let cfg = small_benchmark();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out = cmd_benchmark(&cfg, None, a.path(), Execution::Parallel).unwrap();
    cmd_benchmark(&cfg, None, b.path(), Execution::Sequential).unwrap();
    assert_eq!(out.total, 3 * 2 * 2);
    assert!(out.failures.is_empty());
    let files = read_dir_sorted(a.path());
    assert_eq!(files, read_dir_sorted(b.path()));
    assert_eq!(
        files
            .keys()
            .filter(|k| k.ends_with(".csv") && k.starts_with("campaigns"))
            .count(),
        12
    );

    // Recompute per-iteration means from the campaign CSVs.
    let mut sums: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for (name, bytes) in files
        .iter()
        .filter(|(k, _)| k.starts_with("campaigns") && k.ends_with(".csv"))
    {
        let strategy = Path::new(name)
            .file_name()
            .unwrap()
            .to_string_lossy()
            .split("__")
            .next()
            .unwrap()
            .to_string();
        let mut rd = csv::Reader::from_reader(bytes.as_slice());
        let h = rd.headers().unwrap().clone();
        let (it, norm) = (
            h.iter().position(|c| c == "iteration").unwrap(),
            h.iter().position(|c| c == "g_best_norm").unwrap(),
        );
        let mut prev = f64::NEG_INFINITY;
        for rec in rd.records() {
            let rec = rec.unwrap();
            let v: f64 = rec[norm].parse().unwrap();
            assert!(v >= prev);
            prev = v;
            let e = sums
                .entry((strategy.clone(), rec[it].parse().unwrap()))
                .or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    let mut rd = csv::Reader::from_reader(files["aggregate.csv"].as_slice());
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec.unwrap();
        let (s, n) = sums[&(rec[0].to_string(), rec[2].parse().unwrap())];
        assert_eq!(rec[3].parse::<usize>().unwrap(), n);
        assert!((rec[4].parse::<f64>().unwrap() - s / n as f64).abs() < 1e-12);
        rows += 1;
    }
    assert_eq!(rows, sums.len());
}

#[test]
fn sanodep_benchmark_needs_a_checkpoint() {
    let mut cfg = small_benchmark();
    cfg.benchmark.strategies = vec![StrategyKind::Sanodep];
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    assert!(cmd_benchmark(&cfg, Some(&missing), dir.path(), Execution::Sequential).is_err());
    assert!(matches!(
        cmd_benchmark(&cfg, None, dir.path(), Execution::Sequential),
        Err(HarnessError::Config(_))
    ));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let cfg = tiny_train();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_train(&cfg, a.path(), Execution::Sequential).unwrap();
    let mut half = cfg.clone();
    half.train.sanodep.steps = 2;
    cmd_train(&half, b.path(), Execution::Sequential).unwrap();
    cmd_train(&cfg, b.path(), Execution::Parallel).unwrap();
    assert_eq!(read_dir_sorted(a.path()), read_dir_sorted(b.path()));
    let log = fs::read_to_string(a.path().join(TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn training_config_mismatch_is_a_config_error() {
    let cfg = tiny_train();
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&cfg, dir.path(), Execution::Sequential).unwrap();
    let mut other = cfg.clone();
    other.seed = 99;
    assert!(matches!(
        cmd_train(&other, dir.path(), Execution::Sequential),
        Err(HarnessError::Config(_))
    ));
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(matches!(
        HarnessConfig::from_toml("bogus = 1\n"),
        Err(HarnessError::Config(_))
    ));
    assert!(matches!(
        HarnessConfig::from_toml("[strategy]\nbaseline_budget = 0\n")
            .and_then(|c| c.validate().map(|_| c)),
        Err(HarnessError::Config(_))
    ));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        HarnessConfig::load(&p).unwrap_or_else(|err| panic!("{}: {err}", p.display()));
    }
}
