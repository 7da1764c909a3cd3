//! Optimisation campaigns: GP-Standard, GP-Exp, random search and SANODEP.
//!
//! Every strategy spends one budget unit per simulated batch; intermediate
//! measurements are free. The incumbent is the best profit observed at any
//! measured time, so GP-Exp and SANODEP can improve it through intermediate
//! samples.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{
    expected_improvement, latin_hypercube, mc_acquisition, optimize_acquisition, AcquisitionError,
    ScheduleCandidate, ScheduleSpace, TrajectoryPredictor,
};
use crate::dynamics::{
    self, profit, DynamicsError, FixedParams, ProfitCoefficients, ReactorState, Recipe,
    RecipeBounds, SolverSettings, Task,
};
use crate::exec::Execution;
use crate::gp::{self, recipe_input, FitSettings, GpError, GpHyperparams, GpModel};
use crate::rng::{self, Rng};
use crate::sanodep::SanodepError;
use crate::tasking::{sample_recipe, Observation, ObservedTrajectory};

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("GP fit failed at iteration {iteration} after {attempts} attempts: {source}")]
    Gp {
        iteration: usize,
        attempts: usize,
        source: GpError,
    },
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Model(#[from] SanodepError),
    #[error("invalid campaign settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CampaignError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Sanodep,
    GpStandard,
    GpExp,
    RandomSearch,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Sanodep,
        StrategyKind::GpStandard,
        StrategyKind::GpExp,
        StrategyKind::RandomSearch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Sanodep => "sanodep",
            StrategyKind::GpStandard => "gp_standard",
            StrategyKind::GpExp => "gp_exp",
            StrategyKind::RandomSearch => "random_search",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySettings {
    /// Trajectories per SANODEP campaign.
    pub sanodep_budget: usize,
    /// Trajectories per GP and random-search campaign.
    pub baseline_budget: usize,
    /// Latin hypercube initial design, counted inside the GP budget.
    pub lhs_size: usize,
    /// Free intermediate samples per GP-Exp trajectory.
    pub intermediate_count: usize,
    /// Minimum spacing of SANODEP measurements, hr.
    pub delta_t: f64,
    /// Maximum intermediate measurements per SANODEP trajectory.
    pub max_measurements: usize,
    /// Predictive samples per SANODEP acquisition evaluation.
    pub n_samples: usize,
    /// Acquisition evaluations per GP proposal.
    pub acquisition_budget: usize,
    /// Acquisition evaluations per SANODEP (re-)optimisation.
    pub sanodep_acquisition_budget: usize,
    /// Candidates per SANODEP prediction batch.
    pub sanodep_batch: usize,
    /// Start every SANODEP trajectory from an empty context instead of accumulating.
    pub reset_context: bool,
    pub oracle_budget: usize,
    pub oracle_seed: u64,
    pub gp_fit: FitSettings,
    /// Additional GP fits with fresh restarts before a campaign aborts.
    pub fit_retries: usize,
}

impl Default for StrategySettings {
    fn default() -> Self {
        StrategySettings {
            sanodep_budget: 10,
            baseline_budget: 20,
            lhs_size: 5,
            intermediate_count: 4,
            delta_t: 5.0,
            max_measurements: 4,
            n_samples: 32,
            acquisition_budget: 2048,
            sanodep_acquisition_budget: 256,
            sanodep_batch: 32,
            reset_context: false,
            oracle_budget: 50,
            oracle_seed: 0x0AC1E,
            gp_fit: FitSettings::default(),
            fit_retries: 2,
        }
    }
}

impl StrategySettings {
    pub fn budget(&self, strategy: StrategyKind) -> usize {
        match strategy {
            StrategyKind::Sanodep => self.sanodep_budget,
            _ => self.baseline_budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CampaignError::InvalidSettings(m.to_string()));
        if self.sanodep_budget == 0 || self.baseline_budget == 0 {
            return bad("campaign budgets must be at least 1");
        }
        if self.lhs_size < 2 {
            return bad("lhs_size must be at least 2");
        }
        if self.acquisition_budget == 0 || self.sanodep_acquisition_budget == 0 {
            return bad("acquisition budgets must be at least 1");
        }
        if self.n_samples == 0 || self.sanodep_batch == 0 {
            return bad("n_samples and sanodep_batch must be at least 1");
        }
        if !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            return bad("delta_t must be positive");
        }
        if self.oracle_budget < self.lhs_size {
            return bad("oracle_budget must cover the LHS design");
        }
        Ok(())
    }
}

/// The black box: one task plus the fixed plant description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plant {
    pub task: Task,
    pub bounds: RecipeBounds,
    pub fixed: FixedParams,
    pub solver: SolverSettings,
    pub coeffs: ProfitCoefficients,
}

impl Plant {
    pub fn new(task: Task) -> Self {
        Plant {
            task,
            bounds: RecipeBounds::default(),
            fixed: FixedParams::default(),
            solver: SolverSettings::default(),
            coeffs: ProfitCoefficients::default(),
        }
    }

    /// States of one run of `recipe` at strictly increasing positive `times`;
    /// the run stops at the last time.
    pub fn observe(&self, recipe: &Recipe, times: &[f64]) -> Result<Vec<ReactorState>> {
        let Some(&t_end) = times.last() else {
            return Ok(Vec::new());
        };
        let mut grid = vec![0.0];
        grid.extend_from_slice(times);
        let tr = dynamics::simulate(
            &recipe.with_t_stop(t_end),
            &self.task,
            &self.fixed,
            &self.solver,
            &grid,
        )?;
        Ok(tr.states[1..].to_vec())
    }

    pub fn profit(&self, recipe: &Recipe, t: f64, x: &ReactorState) -> f64 {
        profit(x.p, x.v, t, recipe.feed, &self.coeffs)
    }
}

/// One simulated trajectory of a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Recipe as run, with its final stop time.
    pub recipe: Recipe,
    /// Intermediate measurement times, excluding the stop time.
    pub measurement_times: Vec<f64>,
    /// Every observed `(t, [B, P, S, V])`, ending at the stop time.
    pub observations: Vec<(f64, [f64; 4])>,
    /// Best profit observed on this trajectory.
    pub g_raw: f64,
    pub g_best_raw: f64,
    /// Cumulative batch time, hr.
    pub cum_time_hr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub strategy: StrategyKind,
    pub task: Task,
    pub seed: u64,
    pub budget: usize,
    pub records: Vec<IterationRecord>,
    /// Points held by the surrogate at the end: GP data rows or SANODEP context observations.
    pub model_points: usize,
}

pub const CAMPAIGN_CSV_HEADER: [&str; 14] = [
    "iteration",
    "trajectory_id",
    "B0",
    "P0",
    "S0",
    "V0",
    "F",
    "t_stop",
    "n_measurements",
    "g_raw",
    "g_best_raw",
    "g_best_norm",
    "cum_time_hr",
    "wall_ms",
];

impl CampaignResult {
    pub fn best(&self) -> f64 {
        self.records
            .last()
            .map_or(f64::NEG_INFINITY, |r| r.g_best_raw)
    }

    /// Best-so-far divided by the task maximum.
    pub fn normalised(&self, task_max: f64) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.g_best_raw / task_max)
            .collect()
    }

    /// One CSV row per trajectory. `include_wall` = false writes `wall_ms` as 0
    /// so the file is reproducible byte for byte.
    pub fn write_csv<W: Write>(&self, w: W, task_max: f64, include_wall: bool) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(CAMPAIGN_CSV_HEADER)?;
        for r in &self.records {
            let a = r.recipe.to_array();
            let wall = if include_wall { r.wall_ms } else { 0.0 };
            let mut row = vec![(r.iteration + 1).to_string(), r.iteration.to_string()];
            row.extend(a.iter().map(|v| v.to_string()));
            row.push(r.measurement_times.len().to_string());
            for v in [
                r.g_raw,
                r.g_best_raw,
                r.g_best_raw / task_max,
                r.cum_time_hr,
                wall,
            ] {
                row.push(v.to_string());
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Settings and identity of one campaign, written next to its CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignManifest {
    pub strategy: StrategyKind,
    pub distribution: String,
    pub task_index: usize,
    pub task: Task,
    pub seed: u64,
    pub task_max: f64,
    pub settings: StrategySettings,
}

struct Recorder {
    records: Vec<IterationRecord>,
    g_best: f64,
    cum_time: f64,
}

impl Recorder {
    fn new() -> Self {
        Recorder {
            records: Vec::new(),
            g_best: f64::NEG_INFINITY,
            cum_time: 0.0,
        }
    }

    fn push(
        &mut self,
        recipe: Recipe,
        measurement_times: Vec<f64>,
        obs: Vec<(f64, ReactorState)>,
        g: f64,
        start: Instant,
    ) {
        self.g_best = self.g_best.max(g);
        self.cum_time += recipe.t_stop;
        self.records.push(IterationRecord {
            iteration: self.records.len(),
            recipe,
            measurement_times,
            observations: obs.iter().map(|(t, x)| (*t, x.to_array())).collect(),
            g_raw: g,
            g_best_raw: self.g_best,
            cum_time_hr: self.cum_time,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
}

const KEY_LHS: u64 = 1;
const KEY_FIT: u64 = 2;
const KEY_ACQ: u64 = 3;
const KEY_RANDOM: u64 = 4;
const KEY_MC: u64 = 5;

/// `n` times evenly spaced strictly inside `(0, t_stop)`.
pub fn intermediate_times(t_stop: f64, n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| t_stop * i as f64 / (n + 1) as f64)
        .collect()
}

/// GP-BO observing profit only at the stop time.
pub fn run_gp_standard(
    plant: &Plant,
    settings: &StrategySettings,
    seed: u64,
    budget: usize,
) -> Result<CampaignResult> {
    run_gp(plant, settings, seed, budget, 0, StrategyKind::GpStandard)
}

/// GP-BO with `settings.intermediate_count` free samples per trajectory.
pub fn run_gp_exp(
    plant: &Plant,
    settings: &StrategySettings,
    seed: u64,
    budget: usize,
) -> Result<CampaignResult> {
    run_gp(
        plant,
        settings,
        seed,
        budget,
        settings.intermediate_count,
        StrategyKind::GpExp,
    )
}

fn run_gp(
    plant: &Plant,
    settings: &StrategySettings,
    seed: u64,
    budget: usize,
    n_inter: usize,
    kind: StrategyKind,
) -> Result<CampaignResult> {
    settings.validate()?;
    // GP-Standard and GP-Exp share streams so a zero intermediate count reproduces GP-Standard.
    let tag = StrategyKind::GpStandard.tag();
    let t_max = plant.solver.t_max;
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut rec = Recorder::new();
    let evaluate =
        |recipe: Recipe, rec: &mut Recorder, xs: &mut Vec<Vec<f64>>, ys: &mut Vec<f64>, start| {
            let inter = intermediate_times(recipe.t_stop, n_inter);
            let mut times = inter.clone();
            times.push(recipe.t_stop);
            let states = plant.observe(&recipe, &times)?;
            let mut best = f64::NEG_INFINITY;
            let mut obs = Vec::with_capacity(times.len());
            for (&t, x) in times.iter().zip(&states) {
                let g = plant.profit(&recipe, t, x);
                xs.push(recipe_input(&recipe, t, &plant.bounds, t_max));
                ys.push(g);
                best = best.max(g);
                obs.push((t, *x));
            }
            rec.push(recipe, inter, obs, best, start);
            Ok::<(), CampaignError>(())
        };

    let design = latin_hypercube(
        settings.lhs_size,
        6,
        &mut rng::stream(seed, &[tag, KEY_LHS]),
    );
    for u in design.iter().take(budget) {
        evaluate(
            plant.bounds.from_unit(u),
            &mut rec,
            &mut xs,
            &mut ys,
            Instant::now(),
        )?;
    }

    let mut hyper: Option<GpHyperparams> = None;
    for it in rec.records.len()..budget {
        let start = Instant::now();
        let model = fit_with_retries(&xs, &ys, hyper.as_ref(), settings, seed, tag, it)?;
        hyper = Some(model.hyper.clone());
        let g_best = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let incumbent = xs[ys.iter().position(|&y| y == g_best).unwrap_or(0)].clone();
        let bounds = plant.bounds;
        let acq = |us: &[Vec<f64>]| -> std::result::Result<Vec<f64>, AcquisitionError> {
            Ok(us
                .iter()
                .map(|u| {
                    let recipe = bounds.from_unit(u);
                    let (m, v) =
                        model.posterior(&recipe_input(&recipe, recipe.t_stop, &bounds, t_max));
                    expected_improvement(m, v.sqrt(), g_best)
                })
                .collect())
        };
        let seed_point = gp_unit_point(&incumbent, &plant.bounds, t_max);
        let res = optimize_acquisition(
            acq,
            6,
            settings.acquisition_budget,
            &[seed_point],
            &mut rng::stream(seed, &[tag, KEY_ACQ, it as u64]),
        )?;
        evaluate(
            plant.bounds.from_unit(&res.best),
            &mut rec,
            &mut xs,
            &mut ys,
            start,
        )?;
    }
    Ok(CampaignResult {
        strategy: kind,
        task: plant.task,
        seed,
        budget,
        records: rec.records,
        model_points: xs.len(),
    })
}

/// Unit-cube recipe coordinates of a GP input row, with its time as the stop time.
fn gp_unit_point(x: &[f64], bounds: &RecipeBounds, t_max: f64) -> Vec<f64> {
    let mut u = x[..5].to_vec();
    let (lo, hi) = bounds.t_stop;
    u.push(((x[5] * t_max - lo) / (hi - lo)).clamp(0.0, 1.0));
    u
}

fn fit_with_retries(
    x: &[Vec<f64>],
    y: &[f64],
    warm: Option<&GpHyperparams>,
    settings: &StrategySettings,
    seed: u64,
    tag: u64,
    iteration: usize,
) -> Result<GpModel> {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(1e-12);
    let init = warm
        .cloned()
        .unwrap_or_else(|| GpHyperparams::isotropic(x[0].len(), 0.3, var, 1e-4 * var));
    let mut last = None;
    for attempt in 0..=settings.fit_retries {
        let mut r = rng::stream(seed, &[tag, KEY_FIT, iteration as u64, attempt as u64]);
        match gp::fit(x.to_vec(), y, &init, &settings.gp_fit, &mut r) {
            Ok(m) => return Ok(m),
            Err(e) => {
                log::warn!("GP fit attempt {attempt} failed at iteration {iteration}: {e}");
                last = Some(e);
            }
        }
    }
    Err(CampaignError::Gp {
        iteration,
        attempts: settings.fit_retries + 1,
        source: last.expect("at least one attempt"),
    })
}

/// Uniform random recipes, each observed at its stop time.
pub fn run_random(plant: &Plant, seed: u64, budget: usize) -> Result<CampaignResult> {
    let tag = StrategyKind::RandomSearch.tag();
    let mut rec = Recorder::new();
    for it in 0..budget {
        let start = Instant::now();
        let recipe = sample_recipe(
            &plant.bounds,
            &mut rng::stream(seed, &[tag, KEY_RANDOM, it as u64]),
        );
        let x = plant.observe(&recipe, &[recipe.t_stop])?[0];
        let g = plant.profit(&recipe, recipe.t_stop, &x);
        rec.push(recipe, Vec::new(), vec![(recipe.t_stop, x)], g, start);
    }
    Ok(CampaignResult {
        strategy: StrategyKind::RandomSearch,
        task: plant.task,
        seed,
        budget,
        records: rec.records,
        model_points: 0,
    })
}

/// Best profit of a GP-Standard run with the oracle budget and seed.
pub fn task_max_oracle(plant: &Plant, settings: &StrategySettings) -> Result<f64> {
    let best = run_gp_standard(
        plant,
        settings,
        settings.oracle_seed,
        settings.oracle_budget,
    )?
    .best();
    if best <= 0.0 {
        log::warn!("task maximum {best} is not positive; normalised values change sign");
    }
    Ok(best)
}

/// Schedule-aware SANODEP loop.
///
/// Each trajectory starts from a recipe and schedule maximising the Monte-Carlo
/// acquisition in forecast mode. After every measurement the observation joins
/// the context and the rest of the schedule (including a possibly earlier stop
/// time) is re-optimised. Model weights never change.
pub fn run_sanodep<P: TrajectoryPredictor + ?Sized>(
    model: &P,
    plant: &Plant,
    settings: &StrategySettings,
    seed: u64,
    budget: usize,
    exec: Execution,
) -> Result<CampaignResult> {
    settings.validate()?;
    let tag = StrategyKind::Sanodep.tag();
    let mut context: Vec<ObservedTrajectory> = Vec::new();
    let mut rec = Recorder::new();
    let mut incumbent: Option<Recipe> = None;
    for it in 0..budget {
        let start = Instant::now();
        if settings.reset_context {
            context.clear();
        }
        let keys = |round: u64| [tag, KEY_ACQ, it as u64, round];
        let space = ScheduleSpace::new(plant.bounds, settings.delta_t, settings.max_measurements);
        let mut plan = optimise_schedule(
            model,
            &context,
            &space,
            true,
            rec.g_best,
            incumbent.as_ref(),
            settings,
            plant,
            seed,
            &keys(0),
            exec,
        )?;
        let recipe0 = plan.recipe;
        let x0 = recipe0.initial_state().to_array().to_vec();
        let mut current = ObservedTrajectory::initial_triple(recipe0.condition().to_vec(), x0);
        let mut measured: Vec<f64> = Vec::new();
        let mut obs: Vec<(f64, ReactorState)> = Vec::new();
        let mut best_here = (f64::NEG_INFINITY, 0.0);
        let mut g_best = rec.g_best;
        let mut round = 1;
        while let Some(&t_next) = plan.times.first() {
            let mut times = measured.clone();
            times.push(t_next);
            let x = *plant
                .observe(&plan.recipe, &times)?
                .last()
                .expect("one state per time");
            let g = plant.profit(&plan.recipe, t_next, &x);
            if g > best_here.0 {
                best_here = (g, t_next);
            }
            g_best = g_best.max(g);
            measured.push(t_next);
            obs.push((t_next, x));
            current.points.push(Observation {
                t: t_next,
                state: x.to_array().to_vec(),
            });
            let left = settings.max_measurements.saturating_sub(measured.len());
            let space =
                ScheduleSpace::remaining(plan.recipe, plant.bounds, t_next, settings.delta_t, left);
            let mut ctx = context.clone();
            ctx.push(current.clone());
            plan = optimise_schedule(
                model,
                &ctx,
                &space,
                false,
                g_best,
                None,
                settings,
                plant,
                seed,
                &keys(round),
                exec,
            )?;
            round += 1;
        }
        let recipe = plan.recipe;
        let t_stop = recipe.t_stop;
        let x = match measured.last() {
            Some(&t) if t >= t_stop => obs.last().expect("measured").1,
            _ => {
                let mut times = measured.clone();
                times.push(t_stop);
                *plant
                    .observe(&recipe, &times)?
                    .last()
                    .expect("one state per time")
            }
        };
        if measured.last() != Some(&t_stop) {
            obs.push((t_stop, x));
            current.points.push(Observation {
                t: t_stop,
                state: x.to_array().to_vec(),
            });
        }
        let g = plant.profit(&recipe, t_stop, &x);
        if g > best_here.0 {
            best_here = (g, t_stop);
        }
        if best_here.0 > rec.g_best {
            incumbent = Some(recipe.with_t_stop(best_here.1));
        }
        context.push(current);
        rec.push(recipe, measured, obs, best_here.0, start);
    }
    Ok(CampaignResult {
        strategy: StrategyKind::Sanodep,
        task: plant.task,
        seed,
        budget,
        model_points: context.iter().map(|c| c.points.len()).sum(),
        records: rec.records,
    })
}

/// Maximises the Monte-Carlo acquisition over `space`. When no sampled
/// trajectory beats the incumbent the acquisition is flat at zero, and the
/// expected best profit of the schedule is maximised instead.
#[allow(clippy::too_many_arguments)]
fn optimise_schedule<P: TrajectoryPredictor + ?Sized>(
    model: &P,
    context: &[ObservedTrajectory],
    space: &ScheduleSpace,
    forecast: bool,
    g_best: f64,
    incumbent: Option<&Recipe>,
    settings: &StrategySettings,
    plant: &Plant,
    seed: u64,
    keys: &[u64],
    exec: Execution,
) -> Result<ScheduleCandidate> {
    // Every batch reuses one latent noise stream, so values are comparable across batches.
    let noise = rng::stream(seed, &[keys, &[KEY_MC]].concat());
    let coeffs = plant.coeffs;
    let search = |g: f64, attempt: u64| -> std::result::Result<_, AcquisitionError> {
        let eval_chunk =
            |cands: &[ScheduleCandidate]| -> std::result::Result<Vec<f64>, AcquisitionError> {
                let run = |c: &[ScheduleCandidate]| {
                    mc_acquisition(
                        model,
                        context,
                        c,
                        forecast,
                        g,
                        settings.n_samples,
                        &coeffs,
                        &mut noise.clone(),
                    )
                };
                match run(cands) {
                    Ok(v) => Ok(v),
                    Err(AcquisitionError::Model(SanodepError::NonFiniteLatent)) => Ok(cands
                        .iter()
                        .map(|c| run(std::slice::from_ref(c)).map_or(f64::NEG_INFINITY, |v| v[0]))
                        .collect()),
                    Err(e) => Err(e),
                }
            };
        let acq = |us: &[Vec<f64>]| -> std::result::Result<Vec<f64>, AcquisitionError> {
            let cands: Vec<ScheduleCandidate> = us.iter().map(|u| space.decode(u)).collect();
            let chunks: Vec<&[ScheduleCandidate]> = cands.chunks(settings.sanodep_batch).collect();
            let mut out = Vec::with_capacity(us.len());
            for v in exec.map(&chunks, |c| eval_chunk(c)) {
                out.extend(v?);
            }
            Ok(out)
        };
        let seeds: Vec<Vec<f64>> = match (space.fixed, incumbent) {
            (Some(recipe), _) => vec![space.encode_recipe(&recipe)],
            (None, Some(best)) => vec![space.encode_recipe(best)],
            (None, None) => Vec::new(),
        };
        let mut r: Rng = rng::stream(seed, &[keys, &[attempt]].concat());
        match optimize_acquisition(
            acq,
            space.dim(),
            settings.sanodep_acquisition_budget,
            &seeds,
            &mut r,
        ) {
            // Every candidate failed: retry once from fresh random starts.
            Err(AcquisitionError::Infeasible(_)) => {
                let mut r = rng::stream(seed, &[keys, &[attempt, u64::MAX]].concat());
                optimize_acquisition(
                    acq,
                    space.dim(),
                    settings.sanodep_acquisition_budget,
                    &[],
                    &mut r,
                )
            }
            other => other,
        }
    };
    let mut res = search(g_best, 0)?;
    if res.value <= 0.0 && g_best > f64::NEG_INFINITY {
        res = search(f64::NEG_INFINITY, 1)?;
    }
    Ok(space.decode(&res.best))
}
