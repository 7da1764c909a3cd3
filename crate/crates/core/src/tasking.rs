//! Task, recipe and episode sampling for meta-training and testing.
//!
//! A *system family* draws one black-box system and simulates several
//! trajectories of it on a common grid ([`SystemSample`]). Episodes are then
//! carved out of a system sample: an observed context from `M` trajectories plus
//! a forecast or interpolation update on one trajectory, with nested
//! context ⊆ target subsamples per trajectory.

use std::io::{Read, Write};

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    self, DynamicsError, FixedParams, Recipe, RecipeBounds, SolverSettings, Task,
};
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum TaskingError {
    #[error("invalid task distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
    #[error("simulation failed: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("system diverged on {attempts} consecutive draws")]
    TooManyDivergences { attempts: usize },
    #[error("episode cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Uniform window around an offset copy of the nominal task:
/// `k_i ~ δ·k_nom,i + U[(1-Δ)·k_nom,i, (1+Δ)·k_nom,i]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDistribution {
    pub nominal: Task,
    /// Offset δ, dimensionless.
    pub offset: f64,
    /// Window half-width Δ, dimensionless.
    pub window: f64,
}

impl TaskDistribution {
    pub fn new(offset: f64, window: f64) -> Self {
        TaskDistribution {
            nominal: Task::nominal(),
            offset,
            window,
        }
    }

    /// Meta-training prior: δ = 0, Δ = 0.05.
    pub fn training_prior() -> Self {
        Self::new(0.0, 0.05)
    }

    pub fn validate(&self) -> Result<(), TaskingError> {
        if !(self.window >= 0.0 && self.window.is_finite() && self.offset.is_finite()) {
            return Err(TaskingError::InvalidDistribution(format!(
                "offset {} / window {} must be finite with window >= 0",
                self.offset, self.window
            )));
        }
        self.nominal
            .validate()
            .map_err(|e| TaskingError::InvalidDistribution(e.to_string()))?;
        if self.offset + 1.0 - self.window <= 0.0 {
            return Err(TaskingError::InvalidDistribution(format!(
                "offset {} with window {} admits non-positive parameters",
                self.offset, self.window
            )));
        }
        Ok(())
    }

    /// Per-component support `[lo, hi]`.
    pub fn support(&self) -> [(f64, f64); 6] {
        let k = self.nominal.to_array();
        let mut s = [(0.0, 0.0); 6];
        for i in 0..6 {
            s[i] = (
                (self.offset + 1.0 - self.window) * k[i],
                (self.offset + 1.0 + self.window) * k[i],
            );
        }
        s
    }

    pub fn contains(&self, task: &Task) -> bool {
        task.to_array()
            .iter()
            .zip(self.support())
            .all(|(&v, (lo, hi))| v >= lo && v <= hi)
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<Task, TaskingError> {
        self.validate()?;
        let k = self.nominal.to_array();
        let mut out = [0.0; 6];
        for i in 0..6 {
            let u: f64 = rng.gen();
            out[i] = self.offset * k[i] + (1.0 - self.window + 2.0 * self.window * u) * k[i];
        }
        Ok(Task::from_array(out))
    }
}

/// Componentwise sample from the offset window.
pub fn sample_task(dist: &TaskDistribution, rng: &mut Rng) -> Result<Task, TaskingError> {
    dist.sample(rng)
}

/// Uniform recipe over `bounds`; `t_stop` is uniform on `(lo, hi]`.
pub fn sample_recipe(bounds: &RecipeBounds, rng: &mut Rng) -> Recipe {
    let r = bounds.ranges();
    let mut a = [0.0; 6];
    for i in 0..5 {
        a[i] = r[i].0 + rng.gen::<f64>() * (r[i].1 - r[i].0);
    }
    // 1 - U[0,1) lies in (0, 1]
    a[5] = r[5].0 + (1.0 - rng.gen::<f64>()) * (r[5].1 - r[5].0);
    Recipe::from_array(a)
}

/// Named testing/training distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedDistribution {
    pub name: String,
    pub offset: f64,
    pub window: f64,
}

impl NamedDistribution {
    pub fn new(name: &str, offset: f64, window: f64) -> Self {
        NamedDistribution {
            name: name.to_string(),
            offset,
            window,
        }
    }

    pub fn distribution(&self) -> TaskDistribution {
        TaskDistribution::new(self.offset, self.window)
    }
}

/// The seven testing distributions, each offset sign listed separately.
pub fn testing_distributions() -> Vec<NamedDistribution> {
    vec![
        NamedDistribution::new("very_off_task_neg", -0.5, 0.01),
        NamedDistribution::new("slightly_off_task_neg", -0.06, 0.01),
        NamedDistribution::new("almost_off_task_neg", -0.04, 0.01),
        NamedDistribution::new("on_task", 0.0, 0.01),
        NamedDistribution::new("almost_off_task_pos", 0.04, 0.01),
        NamedDistribution::new("slightly_off_task_pos", 0.06, 0.01),
        NamedDistribution::new("very_off_task_pos", 0.5, 0.01),
    ]
}

/// Fixed affine standardisation of times, conditions and states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub time_scale: f64,
    pub condition_offset: Vec<f64>,
    pub condition_scale: Vec<f64>,
    pub state_offset: Vec<f64>,
    pub state_scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(cond_dim: usize, state_dim: usize, time_scale: f64) -> Self {
        Normalizer {
            time_scale,
            condition_offset: vec![0.0; cond_dim],
            condition_scale: vec![1.0; cond_dim],
            state_offset: vec![0.0; state_dim],
            state_scale: vec![1.0; state_dim],
        }
    }

    /// Midpoints and half-ranges of the recipe bounds; time over the horizon.
    pub fn penicillin(bounds: &RecipeBounds, t_max: f64) -> Self {
        let r = bounds.ranges();
        let mid = |i: usize| 0.5 * (r[i].0 + r[i].1);
        let half = |i: usize| 0.5 * (r[i].1 - r[i].0);
        Normalizer {
            time_scale: t_max,
            condition_offset: (0..5).map(mid).collect(),
            condition_scale: (0..5).map(half).collect(),
            state_offset: (0..4).map(mid).collect(),
            state_scale: (0..4).map(half).collect(),
        }
    }

    pub fn time(&self, t: f64) -> f64 {
        t / self.time_scale
    }

    pub fn condition(&self, c: &[f64]) -> Vec<f64> {
        c.iter()
            .zip(self.condition_offset.iter().zip(&self.condition_scale))
            .map(|(v, (o, s))| (v - o) / s)
            .collect()
    }

    pub fn state(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.state_offset.iter().zip(&self.state_scale))
            .map(|(v, (o, s))| (v - o) / s)
            .collect()
    }

    pub fn state_inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.state_offset.iter().zip(&self.state_scale))
            .map(|(v, (o, s))| v * s + o)
            .collect()
    }
}

/// One trajectory of a sampled system on the family grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledTrajectory {
    /// Conditioning vector (initial state plus any constant controls).
    pub condition: Vec<f64>,
    /// `states[i]` is the state at `grid[i]`; `states[0]` is the initial state.
    pub states: Vec<Vec<f64>>,
}

/// Several trajectories of one drawn system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSample {
    /// Parameters of the drawn system (kinetic parameters for the reactor).
    pub params: Vec<f64>,
    pub grid: Vec<f64>,
    pub trajectories: Vec<SampledTrajectory>,
}

/// A distribution over dynamical systems that can generate meta-training data.
pub trait SystemFamily: Send + Sync {
    fn state_dim(&self) -> usize;
    fn condition_dim(&self) -> usize;
    fn horizon(&self) -> f64;
    fn normalizer(&self) -> Normalizer;
    /// Draws a system and simulates `n` trajectories of it on `grid`.
    fn sample_system(
        &self,
        n: usize,
        grid: &[f64],
        rng: &mut Rng,
    ) -> Result<SystemSample, TaskingError>;
}

/// Penicillin reactor with tasks drawn from a [`TaskDistribution`].
#[derive(Debug, Clone)]
pub struct PenicillinFamily {
    pub dist: TaskDistribution,
    pub bounds: RecipeBounds,
    pub fixed: FixedParams,
    pub solver: SolverSettings,
}

impl PenicillinFamily {
    pub fn new(dist: TaskDistribution) -> Self {
        PenicillinFamily {
            dist,
            bounds: RecipeBounds::default(),
            fixed: FixedParams::default(),
            solver: SolverSettings::default(),
        }
    }

    /// Simulates `n` random recipes under a given task on `grid` (no retries).
    pub fn simulate_task(
        &self,
        task: &Task,
        n: usize,
        grid: &[f64],
        rng: &mut Rng,
    ) -> Result<SystemSample, TaskingError> {
        let t_end = *grid
            .last()
            .ok_or_else(|| TaskingError::InvalidConfig("empty grid".into()))?;
        let mut trajectories = Vec::with_capacity(n);
        for _ in 0..n {
            let recipe = sample_recipe(&self.bounds, rng).with_t_stop(t_end);
            let tr = dynamics::simulate(&recipe, task, &self.fixed, &self.solver, grid)?;
            trajectories.push(SampledTrajectory {
                condition: recipe.condition().to_vec(),
                states: tr.states.iter().map(|s| s.to_array().to_vec()).collect(),
            });
        }
        Ok(SystemSample {
            params: task.to_array().to_vec(),
            grid: grid.to_vec(),
            trajectories,
        })
    }
}

impl SystemFamily for PenicillinFamily {
    fn state_dim(&self) -> usize {
        4
    }

    fn condition_dim(&self) -> usize {
        5
    }

    fn horizon(&self) -> f64 {
        self.solver.t_max
    }

    /// Conditions use the recipe box; states use pilot statistics, because
    /// trajectories leave the initial-state box by more than an order of magnitude.
    fn normalizer(&self) -> Normalizer {
        let mut n = Normalizer::penicillin(&self.bounds, self.solver.t_max);
        let grid = dynamics::linspace(self.solver.t_max, 51);
        let mut r = rng::stream(PILOT_SEED, &[]);
        let mut acc = vec![Vec::new(); 4];
        for _ in 0..64 {
            let Ok(task) = self.dist.sample(&mut r) else {
                break;
            };
            if let Ok(s) = self.simulate_task(&task, 1, &grid, &mut r) {
                for x in &s.trajectories[0].states {
                    for (a, v) in acc.iter_mut().zip(x) {
                        a.push(*v);
                    }
                }
            }
        }
        if acc[0].len() > 1 {
            for (j, a) in acc.iter().enumerate() {
                let m = a.iter().sum::<f64>() / a.len() as f64;
                let sd = (a.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / a.len() as f64).sqrt();
                n.state_offset[j] = m;
                n.state_scale[j] = sd.max(1e-3);
            }
        }
        n
    }

    fn sample_system(
        &self,
        n: usize,
        grid: &[f64],
        rng: &mut Rng,
    ) -> Result<SystemSample, TaskingError> {
        let task = self.dist.sample(rng)?;
        self.simulate_task(&task, n, grid, rng)
    }
}

const PILOT_SEED: u64 = 0x5EED;

/// One-dimensional exponential decay `x' = -k x` with `k ~ U[rate_lo, rate_hi]`.
#[derive(Debug, Clone, Copy)]
pub struct DecayFamily {
    pub rate: (f64, f64),
    pub x0: (f64, f64),
    pub horizon: f64,
}

impl Default for DecayFamily {
    fn default() -> Self {
        DecayFamily {
            rate: (0.5, 1.5),
            x0: (0.5, 2.0),
            horizon: 3.0,
        }
    }
}

impl SystemFamily for DecayFamily {
    fn state_dim(&self) -> usize {
        1
    }

    fn condition_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn normalizer(&self) -> Normalizer {
        Normalizer::identity(1, 1, self.horizon)
    }

    fn sample_system(
        &self,
        n: usize,
        grid: &[f64],
        rng: &mut Rng,
    ) -> Result<SystemSample, TaskingError> {
        let k = self.rate.0 + rng.gen::<f64>() * (self.rate.1 - self.rate.0);
        let trajectories = (0..n)
            .map(|_| {
                let x0 = self.x0.0 + rng.gen::<f64>() * (self.x0.1 - self.x0.0);
                SampledTrajectory {
                    condition: vec![x0],
                    states: grid.iter().map(|t| vec![x0 * (-k * t).exp()]).collect(),
                }
            })
            .collect();
        Ok(SystemSample {
            params: vec![k],
            grid: grid.to_vec(),
            trajectories,
        })
    }
}

/// Serializable choice of system family, stored with trained models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    Penicillin {
        distribution: TaskDistribution,
    },
    Decay {
        rate: (f64, f64),
        x0: (f64, f64),
        horizon: f64,
    },
}

impl FamilySpec {
    pub fn penicillin(distribution: TaskDistribution) -> Self {
        FamilySpec::Penicillin { distribution }
    }

    pub fn decay() -> Self {
        let d = DecayFamily::default();
        FamilySpec::Decay {
            rate: d.rate,
            x0: d.x0,
            horizon: d.horizon,
        }
    }

    pub fn build(&self) -> Box<dyn SystemFamily> {
        match self {
            FamilySpec::Penicillin { distribution } => {
                Box::new(PenicillinFamily::new(*distribution))
            }
            FamilySpec::Decay { rate, x0, horizon } => Box::new(DecayFamily {
                rate: *rate,
                x0: *x0,
                horizon: *horizon,
            }),
        }
    }
}

/// Sizes of the nested subsamples that make up an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub m_traj_min: usize,
    pub m_traj_max: usize,
    pub context_min: usize,
    pub context_max: usize,
    pub target_min: usize,
    pub target_max: usize,
    /// Trajectories simulated per system.
    pub n_x0: usize,
    /// Systems per training step.
    pub n_sys: usize,
    pub n_grid: usize,
    /// Probability of a forecast episode.
    pub lambda: f64,
    /// Interpolation update size range (inclusive).
    pub update_min: usize,
    pub update_max: usize,
    /// Redraws allowed when a system diverges.
    pub max_retries: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            m_traj_min: 1,
            m_traj_max: 5,
            context_min: 2,
            context_max: 8,
            target_min: 8,
            target_max: 20,
            n_x0: 8,
            n_sys: 16,
            n_grid: 100,
            lambda: 0.5,
            update_min: 2,
            update_max: 4,
            max_retries: 10,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), TaskingError> {
        let err = |m: &str| Err(TaskingError::InvalidConfig(m.to_string()));
        if self.m_traj_min < 1 || self.m_traj_min > self.m_traj_max {
            return err("need 1 <= m_traj_min <= m_traj_max");
        }
        if self.context_min < 1
            || self.context_min > self.context_max
            || self.context_max > self.target_max
            || self.target_min > self.target_max
            || self.target_max > self.n_grid
        {
            return err("need 1 <= context_min <= context_max <= target_max <= n_grid and target_min <= target_max");
        }
        if self.m_traj_max >= self.n_x0 {
            return err("n_x0 must exceed m_traj_max so forecast episodes have a fresh trajectory");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return err("lambda must lie in [0, 1]");
        }
        if self.update_min < 1 || self.update_min > self.update_max || self.n_grid < 2 {
            return err("need 1 <= update_min <= update_max and n_grid >= 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    Forecast,
    Interpolate,
}

/// Bernoulli(λ) choice of episode scenario.
pub fn scenario_flip(lambda: f64, rng: &mut Rng) -> Scenario {
    // gen::<f64>() is in [0, 1): λ = 1 always forecasts, λ = 0 never does.
    if rng.gen::<f64>() < lambda {
        Scenario::Forecast
    } else {
        Scenario::Interpolate
    }
}

/// A `(t, x_t)` observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub state: Vec<f64>,
}

/// Observations sharing one initial condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedTrajectory {
    pub condition: Vec<f64>,
    pub t0: f64,
    pub initial_state: Vec<f64>,
    pub points: Vec<Observation>,
}

impl ObservedTrajectory {
    /// Only the `(t₀, x₀, x₀)` triple: the forecast-mode context of a new run.
    pub fn initial_triple(condition: Vec<f64>, initial_state: Vec<f64>) -> Self {
        ObservedTrajectory {
            points: vec![Observation {
                t: 0.0,
                state: initial_state.clone(),
            }],
            condition,
            t0: 0.0,
            initial_state,
        }
    }

    fn from_indices(sample: &SystemSample, traj: usize, idx: &[usize]) -> Self {
        let tr = &sample.trajectories[traj];
        ObservedTrajectory {
            condition: tr.condition.clone(),
            t0: sample.grid[0],
            initial_state: tr.states[0].clone(),
            points: idx
                .iter()
                .map(|&i| Observation {
                    t: sample.grid[i],
                    state: tr.states[i].clone(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One meta-training unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub params: Vec<f64>,
    /// Observed context, one entry per observed trajectory (excluding the update trajectory in
    /// forecast mode).
    pub context: Vec<ObservedTrajectory>,
    /// Target supersets of the observed context trajectories, aligned with `context`.
    pub target: Vec<ObservedTrajectory>,
    pub scenario: Scenario,
    /// Index of the updated trajectory within the system sample.
    pub update_index: usize,
    pub update_context: ObservedTrajectory,
    pub update_target: ObservedTrajectory,
}

impl Episode {
    /// `ℂ ∪ ℂ_update`, with the update merged into its trajectory when it is already observed.
    pub fn full_context(&self) -> Vec<ObservedTrajectory> {
        let mut out = self.context.clone();
        out.push(self.update_context.clone());
        out
    }

    /// `𝕋 = ℂ ∪ 𝕋_update`.
    pub fn full_target(&self) -> Vec<ObservedTrajectory> {
        let mut out = self.full_context();
        out.push(self.update_target.clone());
        out
    }
}

/// Observed-context layout of one system, shared by its `n_x0` episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemEpisodes {
    pub sample: SystemSample,
    /// Number of observed trajectories `M`; trajectories `0..M` are observed.
    pub observed: usize,
    /// Per observed trajectory: target grid indices (sorted) and the nested context indices.
    pub target_idx: Vec<Vec<usize>>,
    pub context_idx: Vec<Vec<usize>>,
}

fn sorted_subsample(pool: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    let k = k.min(pool.len());
    let mut v: Vec<usize> = sample_indices(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    v.sort_unstable();
    v
}

fn nested_subsample(cfg: &EpisodeConfig, n_grid: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let n = rng.gen_range(cfg.target_min..=cfg.target_max).min(n_grid);
    let all: Vec<usize> = (0..n_grid).collect();
    let target = sorted_subsample(&all, n, rng);
    let m = rng.gen_range(cfg.context_min..=cfg.context_max.min(n).max(cfg.context_min));
    let context = sorted_subsample(&target, m, rng);
    (target, context)
}

impl SystemEpisodes {
    /// Draws `M` and the nested target/context subsamples of the observed trajectories.
    pub fn new(
        cfg: &EpisodeConfig,
        sample: SystemSample,
        rng: &mut Rng,
    ) -> Result<Self, TaskingError> {
        cfg.validate()?;
        let n_grid = sample.grid.len();
        let observed = rng
            .gen_range(cfg.m_traj_min..=cfg.m_traj_max)
            .min(sample.trajectories.len());
        let mut target_idx = Vec::with_capacity(observed);
        let mut context_idx = Vec::with_capacity(observed);
        for _ in 0..observed {
            let (t, c) = nested_subsample(cfg, n_grid, rng);
            target_idx.push(t);
            context_idx.push(c);
        }
        Ok(SystemEpisodes {
            sample,
            observed,
            target_idx,
            context_idx,
        })
    }

    /// Builds the episode updating trajectory `k` under `scenario`.
    pub fn episode(
        &self,
        cfg: &EpisodeConfig,
        k: usize,
        scenario: Scenario,
        rng: &mut Rng,
    ) -> Episode {
        let s = &self.sample;
        let n_grid = s.grid.len();
        let mut context = Vec::new();
        let mut target = Vec::new();
        for l in 0..self.observed {
            if scenario == Scenario::Forecast && l == k {
                // The forecast trajectory must be unseen.
                continue;
            }
            context.push(ObservedTrajectory::from_indices(s, l, &self.context_idx[l]));
            target.push(ObservedTrajectory::from_indices(s, l, &self.target_idx[l]));
        }
        let (update_context, update_target) = match scenario {
            Scenario::Forecast => {
                let tidx = if k < self.observed {
                    self.target_idx[k].clone()
                } else {
                    nested_subsample(cfg, n_grid, rng).0
                };
                let tr = &s.trajectories[k];
                (
                    ObservedTrajectory::initial_triple(tr.condition.clone(), tr.states[0].clone()),
                    ObservedTrajectory::from_indices(s, k, &tidx),
                )
            }
            Scenario::Interpolate => {
                if k < self.observed {
                    // n_o further observations on an already observed trajectory.
                    let n_o = rng.gen_range(cfg.update_min..=cfg.update_max);
                    let ctx = &self.context_idx[k];
                    let mut tidx = self.target_idx[k].clone();
                    let mut pool: Vec<usize> =
                        tidx.iter().copied().filter(|i| !ctx.contains(i)).collect();
                    if pool.len() < n_o {
                        pool = (0..n_grid).filter(|i| !ctx.contains(i)).collect();
                    }
                    let new = sorted_subsample(&pool, n_o, rng);
                    for &i in &new {
                        if !tidx.contains(&i) {
                            tidx.push(i);
                        }
                    }
                    tidx.sort_unstable();
                    (
                        ObservedTrajectory::from_indices(s, k, &new),
                        ObservedTrajectory::from_indices(s, k, &tidx),
                    )
                } else {
                    let (t, c) = nested_subsample(cfg, n_grid, rng);
                    (
                        ObservedTrajectory::from_indices(s, k, &c),
                        ObservedTrajectory::from_indices(s, k, &t),
                    )
                }
            }
        };
        Episode {
            params: s.params.clone(),
            context,
            target,
            scenario,
            update_index: k,
            update_context,
            update_target,
        }
    }
}

/// Draws a system, retrying on divergence up to `cfg.max_retries` times.
pub fn sample_system_with_retries<F: SystemFamily + ?Sized>(
    family: &F,
    cfg: &EpisodeConfig,
    seed: u64,
    keys: &[u64],
) -> Result<SystemSample, TaskingError> {
    let grid = dynamics::linspace(family.horizon(), cfg.n_grid);
    let mut path = keys.to_vec();
    path.push(0);
    for attempt in 0..=cfg.max_retries {
        *path.last_mut().unwrap() = attempt as u64;
        let mut r = rng::stream(seed, &path);
        match family.sample_system(cfg.n_x0, &grid, &mut r) {
            Ok(s) => return Ok(s),
            Err(TaskingError::Dynamics(DynamicsError::Diverged { .. })) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(TaskingError::TooManyDivergences {
        attempts: cfg.max_retries + 1,
    })
}

/// Samples a system, lays out its observed context, flips a scenario and returns one episode.
pub fn generate_episode<F: SystemFamily + ?Sized>(
    family: &F,
    cfg: &EpisodeConfig,
    seed: u64,
    episode_index: u64,
) -> Result<Episode, TaskingError> {
    cfg.validate()?;
    let sample = sample_system_with_retries(family, cfg, seed, &[episode_index, 0])?;
    let mut r = rng::stream(seed, &[episode_index, 1]);
    let sys = SystemEpisodes::new(cfg, sample, &mut r)?;
    let k = r.gen_range(0..cfg.n_x0);
    let scenario = scenario_flip(cfg.lambda, &mut r);
    Ok(sys.episode(cfg, k, scenario, &mut r))
}

const CACHE_MAGIC: &[u8; 8] = b"FBEPCACH";
const CACHE_SCHEMA: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    schema_version: u32,
    grid: Vec<f64>,
    n_systems: usize,
    n_trajectories: usize,
    param_dim: usize,
    condition_dim: usize,
    state_dim: usize,
    columns: Vec<String>,
}

/// Writes system samples as a columnar little-endian f64 block behind a JSON header.
///
/// All systems must share the grid and the per-system trajectory count.
pub fn write_cache<W: Write>(mut w: W, systems: &[SystemSample]) -> Result<(), TaskingError> {
    let first = systems
        .first()
        .ok_or_else(|| TaskingError::Cache("no systems to write".into()))?;
    let n_traj = first.trajectories.len();
    let (cd, sd) = first
        .trajectories
        .first()
        .map(|t| (t.condition.len(), t.states[0].len()))
        .ok_or_else(|| TaskingError::Cache("system without trajectories".into()))?;
    for s in systems {
        if s.grid != first.grid
            || s.trajectories.len() != n_traj
            || s.params.len() != first.params.len()
        {
            return Err(TaskingError::Cache(
                "systems differ in grid or shape".into(),
            ));
        }
    }
    let header = CacheHeader {
        schema_version: CACHE_SCHEMA,
        grid: first.grid.clone(),
        n_systems: systems.len(),
        n_trajectories: n_traj,
        param_dim: first.params.len(),
        condition_dim: cd,
        state_dim: sd,
        columns: vec!["params".into(), "conditions".into(), "states".into()],
    };
    let hjson = serde_json::to_vec(&header).map_err(|e| TaskingError::Cache(e.to_string()))?;
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(hjson.len() as u64).to_le_bytes())?;
    w.write_all(&hjson)?;
    let mut put = |v: f64| w.write_all(&v.to_le_bytes());
    for s in systems {
        for &p in &s.params {
            put(p)?;
        }
    }
    for s in systems {
        for t in &s.trajectories {
            for &c in &t.condition {
                put(c)?;
            }
        }
    }
    for s in systems {
        for t in &s.trajectories {
            for x in &t.states {
                for &v in x {
                    put(v)?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_cache<R: Read>(mut r: R) -> Result<Vec<SystemSample>, TaskingError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(TaskingError::Cache("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut hbuf = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut hbuf)?;
    let h: CacheHeader =
        serde_json::from_slice(&hbuf).map_err(|e| TaskingError::Cache(e.to_string()))?;
    if h.schema_version != CACHE_SCHEMA {
        return Err(TaskingError::Cache(format!(
            "unsupported schema {}",
            h.schema_version
        )));
    }
    let mut take = |n: usize| -> Result<Vec<f64>, TaskingError> {
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let ng = h.grid.len();
    let params = take(h.n_systems * h.param_dim)?;
    let conds = take(h.n_systems * h.n_trajectories * h.condition_dim)?;
    let states = take(h.n_systems * h.n_trajectories * ng * h.state_dim)?;
    let mut out = Vec::with_capacity(h.n_systems);
    for s in 0..h.n_systems {
        let trajectories = (0..h.n_trajectories)
            .map(|t| {
                let ti = s * h.n_trajectories + t;
                SampledTrajectory {
                    condition: conds[ti * h.condition_dim..(ti + 1) * h.condition_dim].to_vec(),
                    states: (0..ng)
                        .map(|g| {
                            let o = (ti * ng + g) * h.state_dim;
                            states[o..o + h.state_dim].to_vec()
                        })
                        .collect(),
                }
            })
            .collect();
        out.push(SystemSample {
            params: params[s * h.param_dim..(s + 1) * h.param_dim].to_vec(),
            grid: h.grid.clone(),
            trajectories,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(seed: u64) -> Rng {
        rng::stream(seed, &[])
    }

    #[test]
    fn degenerate_window_returns_nominal() {
        let t = TaskDistribution::new(0.0, 0.0).sample(&mut r(1)).unwrap();
        assert_eq!(t, Task::nominal());
    }

    #[test]
    fn training_prior_stays_within_five_percent() {
        let d = TaskDistribution::training_prior();
        let mut g = r(2);
        let k = Task::nominal().to_array();
        for _ in 0..2000 {
            let t = d.sample(&mut g).unwrap().to_array();
            for i in 0..6 {
                assert!((t[i] / k[i] - 1.0).abs() <= 0.05 + 1e-12);
            }
        }
    }

    #[test]
    fn very_off_task_band() {
        // Interval arithmetic: 0.5·0.11 + [0.99, 1.01]·0.11 = [0.1639, 0.1661].
        let d = TaskDistribution::new(0.5, 0.01);
        let mut g = r(3);
        for _ in 0..2000 {
            let t = d.sample(&mut g).unwrap();
            assert!(t.mu_max >= 0.1639 - 1e-12 && t.mu_max <= 0.1661 + 1e-12);
        }
    }

    #[test]
    fn non_positive_support_is_rejected() {
        assert!(TaskDistribution::new(-1.0, 0.01).sample(&mut r(0)).is_err());
        assert!(TaskDistribution::new(0.0, -0.1).validate().is_err());
    }

    #[test]
    fn testing_distributions_relative_to_training_support() {
        let train = TaskDistribution::training_prior().support();
        for nd in testing_distributions() {
            let s = nd.distribution().support();
            for i in 0..6 {
                let inside = s[i].0 >= train[i].0 - 1e-15 && s[i].1 <= train[i].1 + 1e-15;
                let outside = s[i].0 >= train[i].1 - 1e-15 || s[i].1 <= train[i].0 + 1e-15;
                if nd.name.starts_with("almost") || nd.name == "on_task" {
                    assert!(inside, "{} component {i}", nd.name);
                } else {
                    assert!(outside, "{} component {i}", nd.name);
                }
            }
        }
    }

    #[test]
    fn recipes_respect_bounds_and_replay() {
        let b = RecipeBounds::default();
        let mut g = r(4);
        let mut mean_f = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let rc = sample_recipe(&b, &mut g);
            assert!(b.contains(&rc));
            assert!(rc.t_stop > b.t_stop.0);
            mean_f += rc.feed / n as f64;
        }
        assert!((mean_f - 25.0).abs() < 0.5, "mean F {mean_f}");
        assert_eq!(sample_recipe(&b, &mut r(9)), sample_recipe(&b, &mut r(9)));
    }

    #[test]
    fn scenario_flip_rates() {
        let mut g = r(5);
        assert!((0..1000).all(|_| scenario_flip(1.0, &mut g) == Scenario::Forecast));
        assert!((0..1000).all(|_| scenario_flip(0.0, &mut g) == Scenario::Interpolate));
        let n = 100_000;
        let f = (0..n)
            .filter(|_| scenario_flip(0.5, &mut g) == Scenario::Forecast)
            .count();
        assert!((f as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    fn contained(a: &ObservedTrajectory, b: &ObservedTrajectory) -> bool {
        a.points
            .iter()
            .all(|p| b.points.iter().any(|q| q.t == p.t && q.state == p.state))
    }

    fn system(cfg: &EpisodeConfig, seed: u64) -> SystemEpisodes {
        let fam = DecayFamily::default();
        let s = sample_system_with_retries(&fam, cfg, seed, &[0]).unwrap();
        SystemEpisodes::new(cfg, s, &mut r(seed)).unwrap()
    }

    #[test]
    fn forecast_update_is_initial_triple_of_unseen_trajectory() {
        let cfg = EpisodeConfig::default();
        let sys = system(&cfg, 11);
        for k in 0..cfg.n_x0 {
            let ep = sys.episode(&cfg, k, Scenario::Forecast, &mut r(k as u64));
            assert_eq!(ep.update_context.len(), 1);
            let p = &ep.update_context.points[0];
            assert_eq!(p.t, 0.0);
            assert_eq!(p.state, ep.update_context.initial_state);
            assert_eq!(
                ep.context.len(),
                sys.observed - usize::from(k < sys.observed)
            );
        }
    }

    #[test]
    fn interpolation_update_has_several_points_on_known_trajectory() {
        let cfg = EpisodeConfig::default();
        let sys = system(&cfg, 12);
        let ep = sys.episode(&cfg, 0, Scenario::Interpolate, &mut r(1));
        assert!(ep.update_context.len() >= 2);
        assert!(contained(&ep.update_context, &ep.update_target));
        // The observed context of trajectory 0 is untouched and the update adds new times.
        let old: Vec<f64> = ep.context[0].points.iter().map(|p| p.t).collect();
        assert!(ep.update_context.points.iter().all(|p| !old.contains(&p.t)));
    }

    #[test]
    fn nesting_holds_for_every_trajectory() {
        let cfg = EpisodeConfig::default();
        for seed in 0..20 {
            let sys = system(&cfg, seed);
            for k in 0..cfg.n_x0 {
                for sc in [Scenario::Forecast, Scenario::Interpolate] {
                    let ep = sys.episode(&cfg, k, sc, &mut r(seed * 31 + k as u64));
                    for (c, t) in ep.context.iter().zip(&ep.target) {
                        assert!(contained(c, t));
                    }
                    if sc == Scenario::Interpolate {
                        assert!(contained(&ep.update_context, &ep.update_target));
                    }
                    assert_eq!(ep.full_target().len(), ep.full_context().len() + 1);
                }
            }
        }
    }

    #[test]
    fn full_size_subsample_makes_context_equal_target() {
        let cfg = EpisodeConfig {
            context_min: 10,
            context_max: 10,
            target_min: 10,
            target_max: 10,
            n_grid: 30,
            ..Default::default()
        };
        let sys = system(&cfg, 3);
        for l in 0..sys.observed {
            assert_eq!(sys.context_idx[l], sys.target_idx[l]);
        }
    }

    #[test]
    fn episode_stream_is_seed_deterministic() {
        let cfg = EpisodeConfig::default();
        let fam = PenicillinFamily::new(TaskDistribution::training_prior());
        let a = generate_episode(&fam, &cfg, 42, 3).unwrap();
        let b = generate_episode(&fam, &cfg, 42, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_episode(&fam, &cfg, 42, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cache_round_trip() {
        let cfg = EpisodeConfig {
            n_grid: 12,
            ..Default::default()
        };
        let fam = PenicillinFamily::new(TaskDistribution::training_prior());
        let systems: Vec<_> = (0..3)
            .map(|i| sample_system_with_retries(&fam, &cfg, 1, &[i]).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_cache(&mut buf, &systems).unwrap();
        let back = read_cache(&buf[..]).unwrap();
        assert_eq!(back, systems);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = EpisodeConfig {
            context_max: 30,
            target_max: 20,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EpisodeConfig {
            lambda: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EpisodeConfig {
            m_traj_max: 8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
