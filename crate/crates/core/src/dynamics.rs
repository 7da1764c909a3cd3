//! Mechanistic fed-batch penicillin reactor.
//!
//! Four states (biomass `B`, penicillin `P`, substrate `S`, volume `V`) driven by
//! a constant substrate feed `F`. Growth follows a Contois law, production and
//! maintenance follow Monod-type laws with substrate inhibition on production.
//! Integration is classical fixed-step RK4 with non-negativity clamping after
//! every step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("reactor volume must be positive (got {0})")]
    ZeroVolume(f64),
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("trajectory diverged at t = {time} hr ({reason})")]
    Diverged {
        time: f64,
        reason: String,
        /// Grid-aligned prefix integrated before the blow-up.
        prefix: Box<Trajectory>,
    },
}

/// Stochastic kinetic parameters defining one black-box instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    /// Contois saturation constant, gS/gB.
    pub k_b: f64,
    /// Production saturation constant, gS/L.
    pub k_p: f64,
    /// Maintenance saturation constant, gS/L.
    pub k_m: f64,
    /// Maximum specific growth rate, 1/hr.
    pub mu_max: f64,
    /// Maximum specific production rate, gP/gB/hr.
    pub rho_max: f64,
    /// Maintenance substrate requirement, gS/gB/hr.
    pub m_s: f64,
}

impl Task {
    pub const NOMINAL: Task = Task {
        k_b: 0.006,
        k_p: 0.0001,
        k_m: 0.0001,
        mu_max: 0.11,
        rho_max: 0.0055,
        m_s: 0.029,
    };

    pub fn nominal() -> Self {
        Self::NOMINAL
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.k_b,
            self.k_p,
            self.k_m,
            self.mu_max,
            self.rho_max,
            self.m_s,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Task {
            k_b: a[0],
            k_p: a[1],
            k_m: a[2],
            mu_max: a[3],
            rho_max: a[4],
            m_s: a[5],
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        for (name, v) in Self::NAMES.iter().zip(self.to_array()) {
            if !(v.is_finite() && v > 0.0) {
                return Err(DynamicsError::InvalidTask(format!(
                    "{name} = {v} must be finite and > 0"
                )));
            }
        }
        Ok(())
    }

    pub const NAMES: [&'static str; 6] = ["k_b", "k_p", "k_m", "mu_max", "rho_max", "m_s"];
}

/// Parameters shared by every batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedParams {
    /// Substrate concentration in the feed, g/L.
    pub s_f: f64,
    /// Penicillin hydrolysis constant, 1/hr.
    pub k_deg: f64,
    /// Substrate inhibition constant, gS/L.
    pub k_in: f64,
    /// Biomass-to-substrate yield, gB/gS.
    pub y_bs: f64,
    /// Penicillin-to-substrate yield, gP/gS.
    pub y_ps: f64,
}

impl Default for FixedParams {
    fn default() -> Self {
        FixedParams {
            s_f: 500.0,
            k_deg: 0.01,
            k_in: 0.1,
            y_bs: 0.47,
            y_ps: 1.2,
        }
    }
}

/// Reactor state: concentrations in g/L and liquid volume in L.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReactorState {
    pub b: f64,
    pub p: f64,
    pub s: f64,
    pub v: f64,
}

impl ReactorState {
    pub const DIM: usize = 4;

    pub fn new(b: f64, p: f64, s: f64, v: f64) -> Self {
        ReactorState { b, p, s, v }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.b, self.p, self.s, self.v]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        ReactorState::new(a[0], a[1], a[2], a[3])
    }

    fn axpy(&self, h: f64, d: &ReactorState) -> ReactorState {
        ReactorState::new(
            self.b + h * d.b,
            self.p + h * d.p,
            self.s + h * d.s,
            self.v + h * d.v,
        )
    }

    fn clamped(self) -> ReactorState {
        ReactorState::new(
            self.b.max(0.0),
            self.p.max(0.0),
            self.s.max(0.0),
            self.v.max(0.0),
        )
    }
}

/// Inclusive sampling ranges for recipe components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecipeBounds {
    pub b0: (f64, f64),
    pub p0: (f64, f64),
    pub s0: (f64, f64),
    pub v0: (f64, f64),
    pub feed: (f64, f64),
    /// Stopping time range, hr. The lower end keeps `t_stop` strictly positive.
    pub t_stop: (f64, f64),
}

impl Default for RecipeBounds {
    fn default() -> Self {
        RecipeBounds {
            b0: (1.0, 5.0),
            p0: (0.0, 3.0),
            s0: (0.0, 10.0),
            v0: (5.0, 8.5),
            feed: (0.0, 50.0),
            t_stop: (1e-3, 150.0),
        }
    }
}

impl RecipeBounds {
    /// Ranges in [`Recipe::to_array`] order.
    pub fn ranges(&self) -> [(f64, f64); 6] {
        [self.b0, self.p0, self.s0, self.v0, self.feed, self.t_stop]
    }

    /// Maps a point of the unit cube onto a recipe.
    pub fn from_unit(&self, u: &[f64]) -> Recipe {
        let r = self.ranges();
        let mut a = [0.0; 6];
        for i in 0..6 {
            let ui = u[i].clamp(0.0, 1.0);
            a[i] = r[i].0 + ui * (r[i].1 - r[i].0);
        }
        Recipe::from_array(a)
    }

    pub fn to_unit(&self, recipe: &Recipe) -> [f64; 6] {
        let r = self.ranges();
        let a = recipe.to_array();
        let mut u = [0.0; 6];
        for i in 0..6 {
            let w = r[i].1 - r[i].0;
            u[i] = if w > 0.0 { (a[i] - r[i].0) / w } else { 0.0 };
        }
        u
    }

    pub fn contains(&self, recipe: &Recipe) -> bool {
        recipe
            .to_array()
            .iter()
            .zip(self.ranges())
            .all(|(&v, (lo, hi))| v >= lo && v <= hi)
    }
}

/// Batch recipe: initial condition, constant feed and stopping time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub b0: f64,
    pub p0: f64,
    pub s0: f64,
    pub v0: f64,
    /// Substrate feed, g/hr.
    pub feed: f64,
    /// Stopping time, hr.
    pub t_stop: f64,
}

impl Recipe {
    pub fn nominal(t_stop: f64) -> Self {
        Recipe {
            b0: 1.5,
            p0: 0.0,
            s0: 0.0,
            v0: 7.0,
            feed: 25.0,
            t_stop,
        }
    }

    pub fn initial_state(&self) -> ReactorState {
        ReactorState::new(self.b0, self.p0, self.s0, self.v0)
    }

    /// `[B0, P0, S0, V0, F, t_stop]`.
    pub fn to_array(&self) -> [f64; 6] {
        [self.b0, self.p0, self.s0, self.v0, self.feed, self.t_stop]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Recipe {
            b0: a[0],
            p0: a[1],
            s0: a[2],
            v0: a[3],
            feed: a[4],
            t_stop: a[5],
        }
    }

    /// Initial condition extended with the feed, the conditioning vector seen by surrogates.
    pub fn condition(&self) -> [f64; 5] {
        [self.b0, self.p0, self.s0, self.v0, self.feed]
    }

    pub fn with_t_stop(mut self, t_stop: f64) -> Self {
        self.t_stop = t_stop;
        self
    }
}

/// One simulated batch on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub recipe: Recipe,
    pub times: Vec<f64>,
    pub states: Vec<ReactorState>,
    pub task_id: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<(f64, ReactorState)> {
        Some((*self.times.last()?, *self.states.last()?))
    }
}

/// Fixed-step solver configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Batch horizon, hr.
    pub t_max: f64,
    /// Maximum RK4 step, hr.
    pub step: f64,
    /// Any state component above this aborts the run.
    pub divergence_cap: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            t_max: 150.0,
            step: 0.05,
            divergence_cap: 1e6,
        }
    }
}

/// Specific rates at a given state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    /// Growth, 1/hr.
    pub mu: f64,
    /// Production, gP/gB/hr.
    pub rho: f64,
    /// Maintenance, gS/gB/hr.
    pub gamma: f64,
}

/// Contois growth, inhibited Monod production and Monod maintenance.
///
/// Non-positive substrate yields zero rates, which also covers the `B = S = 0`
/// corner of the Contois law.
pub fn rates(state: &ReactorState, task: &Task, fixed: &FixedParams) -> Rates {
    let s = state.s;
    if s <= 0.0 {
        return Rates {
            mu: 0.0,
            rho: 0.0,
            gamma: 0.0,
        };
    }
    let mu = task.mu_max * s / (task.k_b * state.b + s);
    let rho = task.rho_max * s / (task.k_p + s * (1.0 + s / fixed.k_in));
    let gamma = task.m_s * s / (task.k_m + s);
    Rates { mu, rho, gamma }
}

/// Mass balances for the four states.
pub fn rhs(
    state: &ReactorState,
    task: &Task,
    fixed: &FixedParams,
    feed: f64,
) -> Result<ReactorState, DynamicsError> {
    if state.v <= 0.0 {
        return Err(DynamicsError::ZeroVolume(state.v));
    }
    let Rates { mu, rho, gamma } = rates(state, task, fixed);
    let ReactorState { b, p, s, v } = *state;
    let dilution = feed / (fixed.s_f * v);
    Ok(ReactorState {
        b: mu * b - b * dilution,
        p: rho * b - fixed.k_deg * p - p * dilution,
        s: -mu * b / fixed.y_bs - rho * b / fixed.y_ps - gamma * b
            + (1.0 - s / fixed.s_f) * feed / v,
        v: feed / fixed.s_f,
    })
}

fn rk4_step(
    x: &ReactorState,
    h: f64,
    task: &Task,
    fixed: &FixedParams,
    feed: f64,
) -> Result<ReactorState, DynamicsError> {
    let k1 = rhs(x, task, fixed, feed)?;
    let k2 = rhs(&x.axpy(0.5 * h, &k1), task, fixed, feed)?;
    let k3 = rhs(&x.axpy(0.5 * h, &k2), task, fixed, feed)?;
    let k4 = rhs(&x.axpy(h, &k3), task, fixed, feed)?;
    Ok(ReactorState {
        b: x.b + h / 6.0 * (k1.b + 2.0 * k2.b + 2.0 * k3.b + k4.b),
        p: x.p + h / 6.0 * (k1.p + 2.0 * k2.p + 2.0 * k3.p + k4.p),
        s: x.s + h / 6.0 * (k1.s + 2.0 * k2.s + 2.0 * k3.s + k4.s),
        v: x.v + h / 6.0 * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v),
    })
}

pub fn validate_grid(grid: &[f64]) -> Result<(), DynamicsError> {
    if grid.is_empty() {
        return Err(DynamicsError::InvalidGrid("empty grid".into()));
    }
    if grid[0] != 0.0 {
        return Err(DynamicsError::InvalidGrid(format!(
            "grid must start at 0 (got {})",
            grid[0]
        )));
    }
    if let Some(w) = grid
        .windows(2)
        .find(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater))
    {
        return Err(DynamicsError::InvalidGrid(format!(
            "grid must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Integrates `recipe` under `task` and reports the state at every grid point up
/// to `recipe.t_stop`; `t_stop` itself is appended when it falls between grid
/// points. Each grid interval is split into equal RK4 steps no longer than
/// `settings.step`.
pub fn simulate(
    recipe: &Recipe,
    task: &Task,
    fixed: &FixedParams,
    settings: &SolverSettings,
    grid: &[f64],
) -> Result<Trajectory, DynamicsError> {
    validate_grid(grid)?;
    task.validate()?;
    let t_stop = recipe.t_stop;
    if !(t_stop > 0.0 && t_stop.is_finite()) {
        return Err(DynamicsError::InvalidRecipe(format!(
            "t_stop = {t_stop} must be > 0"
        )));
    }
    if recipe.feed.is_nan() || recipe.feed < 0.0 {
        return Err(DynamicsError::InvalidRecipe(format!(
            "feed = {} must be >= 0",
            recipe.feed
        )));
    }
    let last = *grid.last().unwrap();
    let tol = 1e-9 * t_stop.max(1.0);
    if last < t_stop - tol {
        return Err(DynamicsError::InvalidGrid(format!(
            "grid ends at {last} before t_stop = {t_stop}"
        )));
    }
    let mut times: Vec<f64> = grid
        .iter()
        .copied()
        .take_while(|&t| t <= t_stop + tol)
        .collect();
    if (times.last().unwrap() - t_stop).abs() > tol {
        times.push(t_stop);
    }

    let x0 = recipe.initial_state();
    if x0.v <= 0.0 {
        return Err(DynamicsError::ZeroVolume(x0.v));
    }
    let mut out = Trajectory {
        recipe: *recipe,
        times: Vec::with_capacity(times.len()),
        states: Vec::with_capacity(times.len()),
        task_id: 0,
    };
    out.times.push(0.0);
    out.states.push(x0);

    let mut x = x0;
    for w in times.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n = ((b - a) / settings.step - 1e-9).ceil().max(1.0) as usize;
        let h = (b - a) / n as f64;
        for i in 0..n {
            let next = rk4_step(&x, h, task, fixed, recipe.feed)?.clamped();
            let arr = next.to_array();
            if let Some(bad) = arr
                .iter()
                .find(|v| !v.is_finite() || **v > settings.divergence_cap)
            {
                return Err(DynamicsError::Diverged {
                    time: a + (i + 1) as f64 * h,
                    reason: format!(
                        "state component {bad} exceeds cap {}",
                        settings.divergence_cap
                    ),
                    prefix: Box::new(out),
                });
            }
            x = next;
        }
        out.times.push(b);
        out.states.push(x);
    }
    Ok(out)
}

/// `n` evenly spaced points on `[0, t_end]`.
pub fn linspace(t_end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| t_end * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Coefficients of the profit objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfitCoefficients {
    /// $ per g of penicillin (applied to `P·V`).
    pub revenue: f64,
    /// $ per hour of batch time.
    pub time_cost: f64,
    /// $ per g of fed substrate.
    pub feed_cost: f64,
}

impl Default for ProfitCoefficients {
    fn default() -> Self {
        ProfitCoefficients {
            revenue: 2.5e-2,
            time_cost: 168.0,
            feed_cost: 8.5e-4,
        }
    }
}

/// Batch profit for a constant feed; the feed integral is `F·t`.
///
/// With the default coefficients the time cost dwarfs the revenue term for any
/// realistic titre, so profit decreases monotonically in `t`.
pub fn profit(p: f64, v: f64, t: f64, feed: f64, c: &ProfitCoefficients) -> f64 {
    c.revenue * p * v - c.time_cost * t - c.feed_cost * feed * t
}

/// Profit with a time-varying feed; the feed integral uses the trapezoid rule on `n` panels.
pub fn profit_with_feed_profile(
    p: f64,
    v: f64,
    t: f64,
    feed: impl Fn(f64) -> f64,
    n: usize,
    c: &ProfitCoefficients,
) -> f64 {
    let n = n.max(1);
    let h = t / n as f64;
    let mut integral = 0.5 * (feed(0.0) + feed(t));
    for i in 1..n {
        integral += feed(i as f64 * h);
    }
    integral *= h;
    c.revenue * p * v - c.time_cost * t - c.feed_cost * integral
}

/// Profit at the end of a simulated trajectory.
pub fn trajectory_profit(traj: &Trajectory, c: &ProfitCoefficients) -> Option<f64> {
    let (t, x) = traj.last()?;
    Some(profit(x.p, x.v, t, traj.recipe.feed, c))
}
