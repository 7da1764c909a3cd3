//! Experiment harness: configuration, the four commands, aggregation and plots.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::campaign::{
    self, task_max_oracle, CampaignError, CampaignManifest, CampaignResult, Plant, StrategyKind,
    StrategySettings,
};
use crate::dynamics::{
    self, DynamicsError, FixedParams, ProfitCoefficients, Recipe, RecipeBounds, SolverSettings,
    Task,
};
use crate::exec::Execution;
use crate::neural::{Checkpoint, NeuralError};
use crate::plot::{self, Series};
use crate::rng;
use crate::sanodep::{
    self, SanodepConfig, SanodepError, SanodepModel, TrainLogRow, Trainer, TrajectoryQuery,
};
use crate::tasking::{
    sample_recipe, testing_distributions, FamilySpec, NamedDistribution, Observation,
    ObservedTrajectory, TaskDistribution, TaskingError,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "sanodep.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    TrainingAbort(SanodepError),
    #[error("{failed} of {total} runs failed")]
    Partial { failed: usize, total: usize },
    #[error(transparent)]
    Sanodep(SanodepError),
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Tasking(#[from] TaskingError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<SanodepError> for HarnessError {
    fn from(e: SanodepError) -> Self {
        match e {
            SanodepError::TrainingAbort { .. }
            | SanodepError::NonFiniteLoss { .. }
            | SanodepError::Neural(NeuralError::NonFiniteGradient) => {
                HarnessError::TrainingAbort(e)
            }
            SanodepError::InvalidConfig(m) => HarnessError::Config(m),
            e => HarnessError::Sanodep(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(
        fs::File::create(path).map_err(io_err(path))?,
    ))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

// ---- configuration ----------------------------------------------------------

/// Plant description shared by every command.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    pub bounds: RecipeBounds,
    pub fixed: FixedParams,
    pub solver: SolverSettings,
    pub profit: ProfitCoefficients,
}

impl PlantConfig {
    pub fn plant(&self, task: Task) -> Plant {
        Plant {
            task,
            bounds: self.bounds,
            fixed: self.fixed,
            solver: self.solver,
            coeffs: self.profit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub recipe: Recipe,
    pub task: Task,
    /// Output rows, evenly spaced on `[0, t_stop]`.
    pub n_grid: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            recipe: Recipe::nominal(150.0),
            task: Task::nominal(),
            n_grid: 151,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Meta-training task distribution.
    pub distribution: NamedDistribution,
    pub sanodep: SanodepConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let prior = TaskDistribution::training_prior();
        TrainConfig {
            distribution: NamedDistribution::new("training_prior", prior.offset, prior.window),
            sanodep: SanodepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MseSweepConfig {
    /// Distribution names; empty means every entry of `distributions`.
    pub distributions: Vec<String>,
    pub tasks_per_distribution: usize,
    /// Forecast trajectories per task.
    pub trajectories: usize,
    /// Fully random trajectories observed per task before forecasting.
    pub context_trajectories: usize,
    /// Observed interior points per context trajectory.
    pub context_points: usize,
    /// Forecast times per trajectory, evenly spaced on `(0, t_max]`.
    pub n_times: usize,
    pub n_samples: usize,
    pub task_seed: u64,
}

impl Default for MseSweepConfig {
    fn default() -> Self {
        MseSweepConfig {
            distributions: Vec::new(),
            tasks_per_distribution: 5,
            trajectories: 20,
            context_trajectories: 2,
            context_points: 8,
            n_times: 20,
            n_samples: 32,
            task_seed: 0x7E57,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub strategies: Vec<StrategyKind>,
    pub distributions: Vec<String>,
    pub tasks_per_distribution: usize,
    pub task_seed: u64,
    /// Write measured wall-clock times into campaign CSVs (breaks byte-identical replay).
    pub record_wall_clock: bool,
    /// Fraction of failed campaigns tolerated before the run counts as partial.
    pub max_failure_rate: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            strategies: StrategyKind::ALL.to_vec(),
            distributions: vec!["on_task".into()],
            tasks_per_distribution: 5,
            task_seed: 0xBE7C,
            record_wall_clock: false,
            max_failure_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    /// Root seed for training and predictive sampling.
    pub seed: u64,
    /// Repetition seeds of every benchmark campaign.
    pub seeds: Vec<u64>,
    /// Named testing distributions.
    pub distributions: Vec<NamedDistribution>,
    pub plant: PlantConfig,
    pub simulate: SimulateConfig,
    pub train: TrainConfig,
    pub strategy: StrategySettings,
    pub mse_sweep: MseSweepConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            schema_version: SCHEMA_VERSION,
            output_dir: PathBuf::from("results"),
            seed: 0,
            seeds: (0..5).collect(),
            distributions: testing_distributions(),
            plant: PlantConfig::default(),
            simulate: SimulateConfig::default(),
            train: TrainConfig::default(),
            strategy: StrategySettings::default(),
            mse_sweep: MseSweepConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: HarnessConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        for d in &self.distributions {
            d.distribution()
                .validate()
                .map_err(|e| HarnessError::Config(format!("{}: {e}", d.name)))?;
        }
        self.train
            .distribution
            .distribution()
            .validate()
            .map_err(|e| HarnessError::Config(format!("train.distribution: {e}")))?;
        for name in self
            .mse_sweep
            .distributions
            .iter()
            .chain(&self.benchmark.distributions)
        {
            self.distribution(name)?;
        }
        if self.simulate.n_grid < 2 {
            return bad("simulate.n_grid must be at least 2".into());
        }
        if self.mse_sweep.n_times == 0 || self.mse_sweep.n_samples == 0 {
            return bad("mse_sweep.n_times and n_samples must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        self.train
            .sanodep
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.strategy
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn distribution(&self, name: &str) -> Result<&NamedDistribution> {
        self.distributions
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| HarnessError::Config(format!("unknown distribution '{name}'")))
    }

    fn family(&self) -> FamilySpec {
        FamilySpec::penicillin(self.train.distribution.distribution())
    }
}

// ---- simulate ---------------------------------------------------------------

pub const SIMULATE_CSV_HEADER: [&str; 5] = ["t", "B", "P", "S", "V"];

fn write_trajectory_csv(path: &Path, traj: &dynamics::Trajectory) -> Result<()> {
    let mut wr = csv::Writer::from_writer(create(path)?);
    wr.write_record(SIMULATE_CSV_HEADER)?;
    for (t, x) in traj.times.iter().zip(&traj.states) {
        let a = x.to_array();
        wr.write_record([
            t.to_string(),
            a[0].to_string(),
            a[1].to_string(),
            a[2].to_string(),
            a[3].to_string(),
        ])?;
    }
    wr.flush().map_err(io_err(path))
}

/// SVG with one normalised line per state, read back from a trajectory CSV.
pub fn plot_trajectory_csv(path: &Path) -> Result<String> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut cols: Vec<Vec<(f64, f64)>> = vec![Vec::new(); 4];
    for rec in rd.records() {
        let rec = rec?;
        let v: Vec<f64> = rec.iter().map(|s| s.parse().unwrap_or(f64::NAN)).collect();
        for j in 0..4 {
            cols[j].push((v[0], v[j + 1]));
        }
    }
    let series: Vec<Series> = cols
        .into_iter()
        .zip(["B", "P", "S", "V"])
        .map(|(pts, name)| {
            let peak = pts.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
            let scale = if peak > 0.0 { peak } else { 1.0 };
            Series {
                name: format!("{name} (max {peak:.3})"),
                points: pts.into_iter().map(|(t, v)| (t, v / scale)).collect(),
            }
        })
        .collect();
    Ok(plot::line_chart(
        "Simulated trajectory",
        "time [hr]",
        "state / max",
        &series,
        None,
    ))
}

/// Simulates the configured recipe; a diverged run still writes its prefix.
pub fn cmd_simulate(cfg: &HarnessConfig, out: &Path) -> Result<PathBuf> {
    let s = &cfg.simulate;
    let grid = dynamics::linspace(s.recipe.t_stop, s.n_grid);
    let csv_path = out.join("simulate.csv");
    let result = dynamics::simulate(
        &s.recipe,
        &s.task,
        &cfg.plant.fixed,
        &cfg.plant.solver,
        &grid,
    );
    let (traj, err) = match result {
        Ok(t) => (t, None),
        Err(DynamicsError::Diverged {
            time,
            reason,
            prefix,
        }) => {
            let t = (*prefix).clone();
            (
                t,
                Some(DynamicsError::Diverged {
                    time,
                    reason,
                    prefix,
                }),
            )
        }
        Err(e) => return Err(e.into()),
    };
    write_trajectory_csv(&csv_path, &traj)?;
    write_text(&out.join("simulate.svg"), &plot_trajectory_csv(&csv_path)?)?;
    match err {
        Some(e) => {
            log::error!("{e}; wrote {} of {} rows", traj.len(), s.n_grid);
            Err(HarnessError::Partial {
                failed: 1,
                total: 1,
            })
        }
        None => Ok(csv_path),
    }
}

// ---- train ------------------------------------------------------------------

fn read_log_prefix(path: &Path, before: u64) -> Result<Vec<String>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < before)
        })
        .map(str::to_string)
        .collect())
}

fn write_log(path: &Path, prefix: &[String], rows: &[TrainLogRow]) -> Result<()> {
    let mut w = create(path)?;
    let e = io_err(path);
    let res = (|| {
        writeln!(w, "{}", sanodep::TRAIN_LOG_HEADER)?;
        for l in prefix {
            writeln!(w, "{l}")?;
        }
        for r in rows {
            writeln!(w, "{}", r.csv_line())?;
        }
        w.flush()
    })();
    res.map_err(e)
}

/// Meta-trains SANODEP, resuming from `out/sanodep.ckpt` when present.
/// Checkpoints every `checkpoint_every` steps and at the end.
pub fn cmd_train(cfg: &HarnessConfig, out: &Path, exec: Execution) -> Result<PathBuf> {
    let ck_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut trainer = if ck_path.exists() {
        let mut t =
            Trainer::from_checkpoint(&Checkpoint::load(&ck_path).map_err(SanodepError::from)?)?;
        // Only the step target may change between runs.
        t.model.config.steps = cfg.train.sanodep.steps;
        if t.model.config != cfg.train.sanodep || t.seed != cfg.seed {
            return Err(HarnessError::Config(format!(
                "{} was trained with a different configuration or seed",
                ck_path.display()
            )));
        }
        log::info!("resuming from step {}", t.step);
        t
    } else {
        let model = SanodepModel::new(cfg.train.sanodep.clone(), cfg.family(), cfg.seed)?;
        Trainer::new(model, cfg.seed)
    };
    let prefix = read_log_prefix(&log_path, trainer.step)?;
    let every = cfg.train.sanodep.checkpoint_every;
    let mut rows = Vec::new();
    let result = trainer.train_until(cfg.train.sanodep.steps, exec, |t, row| {
        rows.push(*row);
        if row.step % 100 == 0 {
            log::info!(
                "step {} loss {:.4} nll {:.4} kl_d {:.4} kl_l0 {:.4}",
                row.step,
                row.loss,
                row.nll,
                row.kl_d,
                row.kl_l0
            );
        }
        if every > 0 && t.step % every == 0 {
            t.checkpoint()?.save(&ck_path)?;
        }
        Ok(())
    });
    write_log(&log_path, &prefix, &rows)?;
    if let Err(e) = result {
        return Err(e.into());
    }
    trainer
        .checkpoint()?
        .save(&ck_path)
        .map_err(SanodepError::from)?;
    Ok(ck_path)
}

// ---- evaluation -------------------------------------------------------------

/// One forecast error row of the MSE sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct MseRow {
    pub distribution: String,
    pub offset: f64,
    pub task_id: usize,
    pub trajectory_id: usize,
    /// Mean squared error over times and states, physical units.
    pub mse: f64,
    /// Same, on states standardised by the model normaliser.
    pub mse_normalised: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseSweep {
    pub rows: Vec<MseRow>,
    /// Diverged test trajectories per distribution, excluded from `rows`.
    pub excluded: BTreeMap<String, usize>,
}

const KEY_MSE: u64 = 11;
const KEY_BENCH: u64 = 12;
const KEY_CONTRACT: u64 = 13;

/// Random recipe simulated to `t_max` and observed at `n_points` random interior grid points.
fn observed_context(
    plant: &Plant,
    n_points: usize,
    grid: &[f64],
    r: &mut rng::Rng,
) -> std::result::Result<ObservedTrajectory, DynamicsError> {
    let recipe = sample_recipe(&plant.bounds, r).with_t_stop(plant.solver.t_max);
    let tr = dynamics::simulate(&recipe, &plant.task, &plant.fixed, &plant.solver, grid)?;
    let mut idx: Vec<usize> = index::sample(r, grid.len() - 1, n_points.min(grid.len() - 1))
        .into_iter()
        .map(|i| i + 1)
        .collect();
    idx.sort_unstable();
    let mut ctx = ObservedTrajectory::initial_triple(
        recipe.condition().to_vec(),
        tr.states[0].to_array().to_vec(),
    );
    ctx.points.extend(idx.into_iter().map(|i| Observation {
        t: tr.times[i],
        state: tr.states[i].to_array().to_vec(),
    }));
    Ok(ctx)
}

/// `(trajectory_id, mse, mse_normalised)` rows and the diverged-trajectory count.
type TaskMse = (Vec<(usize, f64, f64)>, usize);

/// Forecast MSE of `n` random trajectories of one task given a small observed context.
fn task_mse(
    model: &SanodepModel,
    plant: &Plant,
    cfg: &MseSweepConfig,
    seed: u64,
    keys: &[u64],
) -> Result<TaskMse> {
    let t_max = plant.solver.t_max;
    let mut r = rng::stream(cfg.task_seed, keys);
    let ctx_grid = dynamics::linspace(t_max, 51);
    let mut context = Vec::new();
    for _ in 0..cfg.context_trajectories {
        // A diverged context run is simply skipped.
        if let Ok(c) = observed_context(plant, cfg.context_points, &ctx_grid, &mut r) {
            context.push(c);
        }
    }
    let times: Vec<f64> = dynamics::linspace(t_max, cfg.n_times + 1)[1..].to_vec();
    let mut grid = vec![0.0];
    grid.extend_from_slice(&times);
    let mut queries = Vec::new();
    let mut truths = Vec::new();
    let mut ids = Vec::new();
    let mut excluded = 0;
    for j in 0..cfg.trajectories {
        let recipe = sample_recipe(&plant.bounds, &mut r).with_t_stop(t_max);
        match dynamics::simulate(&recipe, &plant.task, &plant.fixed, &plant.solver, &grid) {
            Ok(tr) => {
                queries.push(TrajectoryQuery {
                    condition: recipe.condition().to_vec(),
                    times: times.clone(),
                    initial_state: Some(recipe.initial_state().to_array().to_vec()),
                });
                truths.push(tr.states[1..].to_vec());
                ids.push(j);
            }
            Err(DynamicsError::Diverged { .. }) => excluded += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if queries.is_empty() {
        return Ok((Vec::new(), excluded));
    }
    let pred = model.predict(
        &context,
        &queries,
        cfg.n_samples,
        &mut rng::stream(seed, keys),
    )?;
    let scale = &model.normalizer.state_scale;
    let rows = ids
        .into_iter()
        .zip(pred.mean.iter().zip(&truths))
        .map(|(j, (mean, truth))| {
            let (mut raw, mut norm, mut n) = (0.0, 0.0, 0.0);
            for (m, x) in mean.iter().zip(truth) {
                for (k, (a, b)) in m.iter().zip(x.to_array()).enumerate() {
                    let e2 = (a - b).powi(2);
                    raw += e2;
                    norm += e2 / (scale[k] * scale[k]);
                    n += 1.0;
                }
            }
            (j, raw / n, norm / n)
        })
        .collect();
    Ok((rows, excluded))
}

/// Forecast MSE per testing distribution, task and trajectory.
pub fn mse_sweep(
    model: &SanodepModel,
    cfg: &HarnessConfig,
    distributions: &[NamedDistribution],
    exec: Execution,
) -> Result<MseSweep> {
    let m = &cfg.mse_sweep;
    let jobs: Vec<(usize, usize)> = (0..distributions.len())
        .flat_map(|d| (0..m.tasks_per_distribution).map(move |t| (d, t)))
        .collect();
    let results = exec.map(&jobs, |&(d, t)| -> Result<(Vec<MseRow>, usize)> {
        let nd = &distributions[d];
        let keys = [KEY_MSE, d as u64, t as u64];
        let task = nd
            .distribution()
            .sample(&mut rng::stream(m.task_seed, &keys))?;
        let plant = cfg.plant.plant(task);
        let (rows, excluded) = task_mse(
            model,
            &plant,
            m,
            cfg.seed,
            &[KEY_MSE, d as u64, t as u64, 1],
        )?;
        Ok((
            rows.into_iter()
                .map(|(j, mse, mse_normalised)| MseRow {
                    distribution: nd.name.clone(),
                    offset: nd.offset,
                    task_id: t,
                    trajectory_id: j,
                    mse,
                    mse_normalised,
                })
                .collect(),
            excluded,
        ))
    });
    let mut out = MseSweep {
        rows: Vec::new(),
        excluded: distributions.iter().map(|d| (d.name.clone(), 0)).collect(),
    };
    for ((d, _), res) in jobs.iter().zip(results) {
        let (rows, excluded) = res?;
        out.rows.extend(rows);
        *out.excluded
            .get_mut(&distributions[*d].name)
            .expect("known distribution") += excluded;
    }
    Ok(out)
}

pub const MSE_CSV_HEADER: [&str; 6] = [
    "distribution",
    "offset",
    "task_id",
    "trajectory_id",
    "mse",
    "mse_normalised",
];

/// Box plot of per-trajectory MSE ordered by offset, read back from an MSE CSV.
pub fn plot_mse_csv(path: &Path) -> Result<String> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut groups: Vec<(String, f64, Vec<f64>)> = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let name = rec[0].to_string();
        let offset: f64 = rec[1].parse().unwrap_or(f64::NAN);
        let mse: f64 = rec[4].parse().unwrap_or(f64::NAN);
        match groups.iter_mut().find(|g| g.0 == name) {
            Some(g) => g.2.push(mse),
            None => groups.push((name, offset, vec![mse])),
        }
    }
    groups.sort_by(|a, b| a.1.total_cmp(&b.1));
    let groups: Vec<(String, Vec<f64>)> = groups
        .into_iter()
        .map(|(n, o, v)| (format!("{n} ({o:+})"), v))
        .collect();
    Ok(plot::box_chart(
        "Trajectory-wise forecast MSE",
        "MSE",
        &groups,
    ))
}

/// Writes `mse.csv`, `mse_summary.csv` and `mse.svg`.
pub fn cmd_mse_sweep(
    cfg: &HarnessConfig,
    checkpoint: &Path,
    out: &Path,
    exec: Execution,
) -> Result<MseSweep> {
    let model = SanodepModel::load(checkpoint)?;
    let dists: Vec<NamedDistribution> = if cfg.mse_sweep.distributions.is_empty() {
        cfg.distributions.clone()
    } else {
        cfg.mse_sweep
            .distributions
            .iter()
            .map(|n| cfg.distribution(n).cloned())
            .collect::<Result<_>>()?
    };
    let sweep = mse_sweep(&model, cfg, &dists, exec)?;
    let path = out.join("mse.csv");
    let mut wr = csv::Writer::from_writer(create(&path)?);
    wr.write_record(MSE_CSV_HEADER)?;
    for r in &sweep.rows {
        wr.write_record([
            r.distribution.clone(),
            r.offset.to_string(),
            r.task_id.to_string(),
            r.trajectory_id.to_string(),
            r.mse.to_string(),
            r.mse_normalised.to_string(),
        ])?;
    }
    wr.flush().map_err(io_err(&path))?;
    drop(wr);
    let spath = out.join("mse_summary.csv");
    let mut wr = csv::Writer::from_writer(create(&spath)?);
    wr.write_record([
        "distribution",
        "offset",
        "n",
        "mean_mse",
        "mean_mse_normalised",
        "excluded",
    ])?;
    for d in &dists {
        let v: Vec<&MseRow> = sweep
            .rows
            .iter()
            .filter(|r| r.distribution == d.name)
            .collect();
        let n = v.len() as f64;
        wr.write_record([
            d.name.clone(),
            d.offset.to_string(),
            v.len().to_string(),
            (v.iter().map(|r| r.mse).sum::<f64>() / n).to_string(),
            (v.iter().map(|r| r.mse_normalised).sum::<f64>() / n).to_string(),
            sweep.excluded[&d.name].to_string(),
        ])?;
    }
    wr.flush().map_err(io_err(&spath))?;
    write_text(&out.join("mse.svg"), &plot_mse_csv(&path)?)?;
    Ok(sweep)
}

/// Mean predictive variance (standardised states) at an interior time, before
/// and after that observation joins the context, for `n_tasks` tasks.
pub fn variance_contraction(
    model: &SanodepModel,
    plant_cfg: &PlantConfig,
    dist: &TaskDistribution,
    n_tasks: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let scale = &model.normalizer.state_scale;
    let mut out = Vec::with_capacity(n_tasks);
    for i in 0..n_tasks {
        let mut r = rng::stream(seed, &[KEY_CONTRACT, i as u64]);
        let plant = plant_cfg.plant(dist.sample(&mut r)?);
        let t_max = plant.solver.t_max;
        let recipe = sample_recipe(&plant.bounds, &mut r).with_t_stop(t_max);
        let grid = dynamics::linspace(t_max, 51);
        let t_obs = grid[rand::Rng::gen_range(&mut r, 5..46)];
        let x_obs = plant.observe(&recipe, &[t_obs])?[0];
        let triple = ObservedTrajectory::initial_triple(
            recipe.condition().to_vec(),
            recipe.initial_state().to_array().to_vec(),
        );
        let mut with_obs = triple.clone();
        with_obs.points.push(Observation {
            t: t_obs,
            state: x_obs.to_array().to_vec(),
        });
        let q = [TrajectoryQuery {
            condition: recipe.condition().to_vec(),
            times: vec![t_obs],
            initial_state: None,
        }];
        let var = |ctx: &[ObservedTrajectory]| -> Result<f64> {
            let p = model.predict(
                ctx,
                &q,
                n_samples,
                &mut rng::stream(seed, &[KEY_CONTRACT, i as u64, 1]),
            )?;
            Ok(p.variance[0][0]
                .iter()
                .zip(scale)
                .map(|(v, s)| v / (s * s))
                .sum::<f64>()
                / scale.len() as f64)
        };
        out.push((var(&[triple])?, var(&[with_obs])?));
    }
    Ok(out)
}

// ---- benchmark --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTask {
    pub distribution: String,
    pub task_index: usize,
    pub task: Task,
    pub task_max: f64,
}

/// Mean and standard deviation of normalised best-so-far at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub strategy: StrategyKind,
    pub distribution: String,
    pub iteration: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_cum_time_hr: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub tasks: Vec<BenchmarkTask>,
    pub campaigns: Vec<(usize, CampaignResult)>,
    pub failures: Vec<String>,
    pub total: usize,
    pub aggregate: Vec<AggregateRow>,
}

impl BenchmarkOutcome {
    /// Mean normalised best-so-far of a strategy at a 1-based iteration.
    pub fn mean_at(
        &self,
        strategy: StrategyKind,
        distribution: &str,
        iteration: usize,
    ) -> Option<f64> {
        self.aggregate
            .iter()
            .find(|r| {
                r.strategy == strategy && r.distribution == distribution && r.iteration == iteration
            })
            .map(|r| r.mean)
    }
}

pub const AGGREGATE_CSV_HEADER: [&str; 7] = [
    "strategy",
    "distribution",
    "iteration",
    "n",
    "mean",
    "std",
    "mean_cum_time_hr",
];

/// Per (strategy, distribution, iteration) statistics over campaigns, keyed by task index.
pub fn aggregate(
    tasks: &[BenchmarkTask],
    campaigns: &[(usize, CampaignResult)],
) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(StrategyKind, String, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for (ti, c) in campaigns {
        let t = &tasks[*ti];
        for (r, norm) in c.records.iter().zip(c.normalised(t.task_max)) {
            groups
                .entry((c.strategy, t.distribution.clone(), r.iteration + 1))
                .or_default()
                .push((norm, r.cum_time_hr));
        }
    }
    groups
        .into_iter()
        .map(|((strategy, distribution, iteration), v)| {
            let n = v.len() as f64;
            let mean = v.iter().map(|x| x.0).sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x.0 - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            AggregateRow {
                strategy,
                distribution,
                iteration,
                n: v.len(),
                mean,
                std: var.sqrt(),
                mean_cum_time_hr: v.iter().map(|x| x.1).sum::<f64>() / n,
            }
        })
        .collect()
}

fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(create(path)?);
    wr.write_record(AGGREGATE_CSV_HEADER)?;
    for r in rows {
        wr.write_record([
            r.strategy.name().to_string(),
            r.distribution.clone(),
            r.iteration.to_string(),
            r.n.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.mean_cum_time_hr.to_string(),
        ])?;
    }
    wr.flush().map_err(io_err(path))
}

/// Convergence plots (vs trajectory count and vs cumulative batch time) of one
/// distribution, read back from an aggregate CSV.
pub fn plot_aggregate_csv(path: &Path, distribution: &str) -> Result<(String, String)> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut by_count: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut by_time: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec?;
        if &rec[1] != distribution {
            continue;
        }
        let p = |i: usize| rec[i].parse::<f64>().unwrap_or(f64::NAN);
        by_count
            .entry(rec[0].to_string())
            .or_default()
            .push((p(2), p(4)));
        by_time
            .entry(rec[0].to_string())
            .or_default()
            .push((p(6), p(4)));
    }
    let to_series = |m: BTreeMap<String, Vec<(f64, f64)>>| -> Vec<Series> {
        m.into_iter()
            .map(|(name, points)| Series { name, points })
            .collect()
    };
    let clip = Some((-1.0, 1.5));
    Ok((
        plot::line_chart(
            &format!("Normalised profit ({distribution})"),
            "trajectories",
            "mean normalised best-so-far",
            &to_series(by_count),
            clip,
        ),
        plot::line_chart(
            &format!("Normalised profit vs batch time ({distribution})"),
            "cumulative batch time [hr]",
            "mean normalised best-so-far",
            &to_series(by_time),
            clip,
        ),
    ))
}

/// Tasks of every benchmark distribution with their oracle maxima.
pub fn benchmark_tasks(cfg: &HarnessConfig, exec: Execution) -> Result<Vec<BenchmarkTask>> {
    let b = &cfg.benchmark;
    let mut specs = Vec::new();
    for (di, name) in b.distributions.iter().enumerate() {
        let dist = cfg.distribution(name)?.distribution();
        for t in 0..b.tasks_per_distribution {
            let task = dist.sample(&mut rng::stream(
                b.task_seed,
                &[KEY_BENCH, di as u64, t as u64],
            ))?;
            specs.push((name.clone(), t, task));
        }
    }
    exec.map(&specs, |(name, t, task)| {
        let task_max = task_max_oracle(&cfg.plant.plant(*task), &cfg.strategy)?;
        Ok(BenchmarkTask {
            distribution: name.clone(),
            task_index: *t,
            task: *task,
            task_max,
        })
    })
    .into_iter()
    .collect()
}

/// Runs the strategy × task × seed matrix. Failed campaigns are logged and excluded.
pub fn run_benchmark(
    cfg: &HarnessConfig,
    model: Option<&SanodepModel>,
    exec: Execution,
) -> Result<BenchmarkOutcome> {
    let b = &cfg.benchmark;
    if b.strategies.contains(&StrategyKind::Sanodep) && model.is_none() {
        return Err(HarnessError::Config(
            "the sanodep strategy needs a trained checkpoint".into(),
        ));
    }
    let tasks = benchmark_tasks(cfg, exec)?;
    let jobs: Vec<(StrategyKind, usize, u64)> = b
        .strategies
        .iter()
        .flat_map(|&s| {
            (0..tasks.len()).flat_map(move |t| cfg.seeds.iter().map(move |&seed| (s, t, seed)))
        })
        .collect();
    let inner = Execution::Sequential;
    let results = exec.map(&jobs, |&(s, t, seed)| {
        let plant = cfg.plant.plant(tasks[t].task);
        let st = &cfg.strategy;
        let budget = st.budget(s);
        match s {
            StrategyKind::GpStandard => campaign::run_gp_standard(&plant, st, seed, budget),
            StrategyKind::GpExp => campaign::run_gp_exp(&plant, st, seed, budget),
            StrategyKind::RandomSearch => campaign::run_random(&plant, seed, budget),
            StrategyKind::Sanodep => campaign::run_sanodep(
                model.expect("checked above"),
                &plant,
                st,
                seed,
                budget,
                inner,
            ),
        }
    });
    let mut campaigns = Vec::new();
    let mut failures = Vec::new();
    for (&(s, t, seed), res) in jobs.iter().zip(results) {
        match res {
            Ok(c) => campaigns.push((t, c)),
            Err(e) => {
                let msg = format!(
                    "{} on {} task {} seed {seed}: {e}",
                    s.name(),
                    tasks[t].distribution,
                    tasks[t].task_index
                );
                log::error!("{msg}");
                failures.push(msg);
            }
        }
    }
    let aggregate = aggregate(&tasks, &campaigns);
    Ok(BenchmarkOutcome {
        tasks,
        campaigns,
        failures,
        total: jobs.len(),
        aggregate,
    })
}

pub fn campaign_stem(strategy: StrategyKind, task: &BenchmarkTask, seed: u64) -> String {
    format!(
        "{}__{}__task{}__seed{}",
        strategy.name(),
        task.distribution,
        task.task_index,
        seed
    )
}

/// Runs the benchmark and writes campaign CSVs and manifests, `tasks.csv`,
/// `aggregate.csv` and convergence plots. More than `max_failure_rate` failed
/// campaigns yields [`HarnessError::Partial`] after everything is written.
pub fn cmd_benchmark(
    cfg: &HarnessConfig,
    checkpoint: Option<&Path>,
    out: &Path,
    exec: Execution,
) -> Result<BenchmarkOutcome> {
    let model = match checkpoint {
        Some(p) if cfg.benchmark.strategies.contains(&StrategyKind::Sanodep) => {
            Some(SanodepModel::load(p)?)
        }
        _ => None,
    };
    let outcome = run_benchmark(cfg, model.as_ref(), exec)?;
    let dir = out.join("campaigns");
    for (t, c) in &outcome.campaigns {
        let task = &outcome.tasks[*t];
        let stem = campaign_stem(c.strategy, task, c.seed);
        let path = dir.join(format!("{stem}.csv"));
        let mut w = create(&path)?;
        c.write_csv(&mut w, task.task_max, cfg.benchmark.record_wall_clock)?;
        w.flush().map_err(io_err(&path))?;
        let manifest = CampaignManifest {
            strategy: c.strategy,
            distribution: task.distribution.clone(),
            task_index: task.task_index,
            task: task.task,
            seed: c.seed,
            task_max: task.task_max,
            settings: cfg.strategy.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        write_text(&dir.join(format!("{stem}.json")), &(json + "\n"))?;
    }
    let tpath = out.join("tasks.csv");
    let mut wr = csv::Writer::from_writer(create(&tpath)?);
    let mut header = vec!["distribution".to_string(), "task_index".to_string()];
    header.extend(Task::NAMES.iter().map(|s| s.to_string()));
    header.push("task_max".into());
    wr.write_record(&header)?;
    for t in &outcome.tasks {
        let mut row = vec![t.distribution.clone(), t.task_index.to_string()];
        row.extend(t.task.to_array().iter().map(|v| v.to_string()));
        row.push(t.task_max.to_string());
        wr.write_record(&row)?;
    }
    wr.flush().map_err(io_err(&tpath))?;
    drop(wr);
    let apath = out.join("aggregate.csv");
    write_aggregate(&apath, &outcome.aggregate)?;
    for name in &cfg.benchmark.distributions {
        let (count, time) = plot_aggregate_csv(&apath, name)?;
        write_text(&out.join(format!("convergence_{name}.svg")), &count)?;
        write_text(&out.join(format!("convergence_time_{name}.svg")), &time)?;
    }
    let failed = outcome.failures.len();
    if failed as f64 > cfg.benchmark.max_failure_rate * outcome.total as f64 {
        return Err(HarnessError::Partial {
            failed,
            total: outcome.total,
        });
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = HarnessConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = HarnessConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn config_rejects_unknown_keys_and_versions() {
        assert!(matches!(
            HarnessConfig::from_toml("bogus = 1"),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(
            HarnessConfig::from_toml("schema_version = 2"),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(
            HarnessConfig::from_toml("[strategy]\nlhs_size = 1"),
            Err(HarnessError::Config(_))
        ));
        let partial =
            HarnessConfig::from_toml("seed = 9\n[benchmark]\ntasks_per_distribution = 2").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.benchmark.tasks_per_distribution, 2);
        assert_eq!(partial.strategy, StrategySettings::default());
    }

    #[test]
    fn defaults_mirror_the_distribution_table() {
        let cfg = HarnessConfig::default();
        let offsets: Vec<f64> = cfg.distributions.iter().map(|d| d.offset).collect();
        assert_eq!(offsets, vec![-0.5, -0.06, -0.04, 0.0, 0.04, 0.06, 0.5]);
        assert!(cfg.distributions.iter().all(|d| d.window == 0.01));
        assert_eq!(cfg.train.distribution.window, 0.05);
        assert_eq!(cfg.strategy.sanodep_budget, 10);
        assert_eq!(cfg.strategy.baseline_budget, 20);
    }

    #[test]
    fn aggregate_statistics() {
        let task = BenchmarkTask {
            distribution: "d".into(),
            task_index: 0,
            task: Task::nominal(),
            task_max: 2.0,
        };
        let plant = Plant::new(Task::nominal());
        let a = campaign::run_random(&plant, 1, 3).unwrap();
        let b = campaign::run_random(&plant, 2, 3).unwrap();
        let rows = aggregate(
            std::slice::from_ref(&task),
            &[(0, a.clone()), (0, b.clone())],
        );
        assert_eq!(rows.len(), 3);
        let m = (a.records[2].g_best_raw / 2.0 + b.records[2].g_best_raw / 2.0) / 2.0;
        assert_eq!(rows[2].mean, m);
        assert_eq!(rows[2].n, 2);
    }
}
