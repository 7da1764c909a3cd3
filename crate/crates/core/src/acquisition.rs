//! Acquisition functions and their optimiser.
//!
//! GP strategies use closed-form expected improvement over `(recipe, t_stop)`.
//! SANODEP uses a Monte-Carlo expected improvement over a whole candidate
//! schedule: sampled predictive trajectories are scored by profit at every
//! scheduled measurement time and at the stop time.

use libm::erfc;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{profit, ProfitCoefficients, Recipe, RecipeBounds};
use crate::rng::Rng;
use crate::sanodep::{PredictiveBatch, SanodepError, SanodepModel, TrajectoryQuery};
use crate::tasking::ObservedTrajectory;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("no feasible candidate: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Model(#[from] SanodepError),
}

pub type Result<T> = std::result::Result<T, AcquisitionError>;

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `(μ - g*)Φ(z) + σφ(z)` with `z = (μ - g*)/σ`; `max(μ - g*, 0)` when `σ = 0`.
pub fn expected_improvement(mean: f64, std: f64, g_best: f64) -> f64 {
    if g_best == f64::INFINITY {
        return 0.0;
    }
    let diff = mean - g_best;
    if std <= 0.0 {
        return diff.max(0.0);
    }
    let z = diff / std;
    (diff * std_normal_cdf(z) + std * std_normal_pdf(z)).max(0.0)
}

/// A recipe with its intermediate measurement times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCandidate {
    pub recipe: Recipe,
    /// Strictly increasing, all before `recipe.t_stop`.
    pub times: Vec<f64>,
}

impl ScheduleCandidate {
    /// Measurement times followed by the stop time.
    pub fn evaluation_times(&self) -> Vec<f64> {
        let mut t = self.times.clone();
        t.push(self.recipe.t_stop);
        t
    }

    /// Spacing, ordering and count constraints relative to a window start `start`.
    pub fn is_feasible(&self, start: f64, delta_t: f64, max_n: usize) -> bool {
        if self.times.len() > max_n {
            return false;
        }
        let mut prev = start;
        for &t in &self.times {
            if t < prev + delta_t - 1e-9 || t >= self.recipe.t_stop {
                return false;
            }
            prev = t;
        }
        true
    }
}

/// Unit-cube parameterisation of recipes and schedules.
///
/// Coordinates are `[B0, P0, S0, V0, F]` (omitted when the recipe is fixed),
/// then `t_stop`, then `max_n` gap coordinates. Gap `i` is
/// `Δt + u_i·(t_hi - start)`; times falling at or after `t_stop` are dropped,
/// so the spacing constraint holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpace {
    pub bounds: RecipeBounds,
    /// Recipe whose initial conditions and feed are already committed.
    pub fixed: Option<Recipe>,
    /// Earliest admissible measurement is `start + delta_t`.
    pub start: f64,
    pub t_stop_range: (f64, f64),
    pub delta_t: f64,
    pub max_n: usize,
}

impl ScheduleSpace {
    /// Fresh trajectory: all recipe coordinates free.
    pub fn new(bounds: RecipeBounds, delta_t: f64, max_n: usize) -> Self {
        ScheduleSpace {
            t_stop_range: bounds.t_stop,
            bounds,
            fixed: None,
            start: 0.0,
            delta_t,
            max_n,
        }
    }

    /// Remaining window of a running trajectory last observed at `t_now`.
    /// The stop time may shrink towards `t_now` but never grow.
    pub fn remaining(
        recipe: Recipe,
        bounds: RecipeBounds,
        t_now: f64,
        delta_t: f64,
        max_n: usize,
    ) -> Self {
        ScheduleSpace {
            bounds,
            t_stop_range: (t_now.min(recipe.t_stop), recipe.t_stop),
            fixed: Some(recipe),
            start: t_now,
            delta_t,
            max_n,
        }
    }

    pub fn dim(&self) -> usize {
        let r = if self.fixed.is_some() { 0 } else { 5 };
        r + 1 + self.max_n
    }

    pub fn decode(&self, u: &[f64]) -> ScheduleCandidate {
        assert_eq!(u.len(), self.dim(), "ScheduleSpace::decode dimension");
        let (mut recipe, rest) = match self.fixed {
            Some(r) => (r, u),
            None => {
                let mut full = [0.5; 6];
                full[..5].copy_from_slice(&u[..5]);
                (self.bounds.from_unit(&full), &u[5..])
            }
        };
        let (lo, hi) = self.t_stop_range;
        recipe.t_stop = lo + rest[0].clamp(0.0, 1.0) * (hi - lo);
        let span = (hi - self.start).max(0.0);
        let mut times = Vec::new();
        let mut prev = self.start;
        for &g in &rest[1..] {
            let t = prev + self.delta_t + g.clamp(0.0, 1.0) * span;
            if t >= recipe.t_stop {
                break;
            }
            times.push(t);
            prev = t;
        }
        ScheduleCandidate { recipe, times }
    }

    /// Unit coordinates of a recipe/stop time with no measurements.
    pub fn encode_recipe(&self, recipe: &Recipe) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.dim());
        if self.fixed.is_none() {
            u.extend_from_slice(&self.bounds.to_unit(recipe)[..5]);
        }
        let (lo, hi) = self.t_stop_range;
        u.push(if hi > lo {
            (recipe.t_stop - lo) / (hi - lo)
        } else {
            0.0
        });
        u.extend(std::iter::repeat_n(1.0, self.max_n));
        u
    }
}

/// Anything that can produce sampled predictive trajectories.
pub trait TrajectoryPredictor: Sync {
    fn predict_batch(
        &self,
        context: &[ObservedTrajectory],
        queries: &[TrajectoryQuery],
        n_samples: usize,
        rng: &mut Rng,
    ) -> std::result::Result<PredictiveBatch, SanodepError>;
}

impl TrajectoryPredictor for SanodepModel {
    fn predict_batch(
        &self,
        context: &[ObservedTrajectory],
        queries: &[TrajectoryQuery],
        n_samples: usize,
        rng: &mut Rng,
    ) -> std::result::Result<PredictiveBatch, SanodepError> {
        self.predict(context, queries, n_samples, rng)
    }
}

/// Monte-Carlo expected improvement of each candidate schedule.
///
/// Each sampled trajectory scores `max_t g(t)` over the candidate's evaluation
/// times; the value is the sample mean of `max(0, score - g_best)`. With no
/// incumbent (`g_best = -∞`) the sample mean of the score itself is returned.
/// Latent samples are shared across candidates, so rankings use common random numbers.
/// With `forecast`, each candidate's own `(t₀, x₀, x₀)` triple joins the context.
#[allow(clippy::too_many_arguments)]
pub fn mc_acquisition<P: TrajectoryPredictor + ?Sized>(
    model: &P,
    context: &[ObservedTrajectory],
    candidates: &[ScheduleCandidate],
    forecast: bool,
    g_best: f64,
    n_samples: usize,
    coeffs: &ProfitCoefficients,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if g_best == f64::INFINITY {
        return Ok(vec![0.0; candidates.len()]);
    }
    let queries: Vec<TrajectoryQuery> = candidates
        .iter()
        .map(|c| TrajectoryQuery {
            condition: c.recipe.condition().to_vec(),
            times: c.evaluation_times(),
            initial_state: forecast.then(|| c.recipe.initial_state().to_array().to_vec()),
        })
        .collect();
    let pred = model.predict_batch(context, &queries, n_samples, rng)?;
    Ok(candidates
        .iter()
        .zip(&queries)
        .zip(&pred.samples)
        .map(|((c, q), samples)| {
            let vals: Vec<f64> = samples
                .iter()
                .map(|traj| {
                    let best = q
                        .times
                        .iter()
                        .zip(traj)
                        .map(|(&t, x)| profit(x[1], x[3], t, c.recipe.feed, coeffs))
                        .fold(f64::NEG_INFINITY, f64::max);
                    if g_best == f64::NEG_INFINITY {
                        best
                    } else {
                        (best - g_best).max(0.0)
                    }
                })
                .collect();
            let v = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            if v.is_finite() {
                v
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect())
}

/// Latin hypercube design of `n` points in `[0, 1]^dim`.
pub fn latin_hypercube(n: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            strata.swap(i, rng.gen_range(0..=i));
        }
        for (p, s) in pts.iter_mut().zip(strata) {
            p[d] = (s as f64 + rng.gen::<f64>()) / n as f64;
        }
    }
    pts
}

/// Result of [`optimize_acquisition`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub best: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

/// Random multi-start search (¾ of the budget) then coordinate refinement (¼)
/// over `[0, 1]^dim`, maximising a batched acquisition.
///
/// `acq` receives candidate batches and returns one value per candidate;
/// non-finite values count as infeasible. Ties keep the earliest candidate.
pub fn optimize_acquisition(
    mut acq: impl FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
    dim: usize,
    budget: usize,
    seeds: &[Vec<f64>],
    rng: &mut Rng,
) -> Result<OptimizeResult> {
    if budget == 0 {
        return Err(AcquisitionError::ZeroBudget);
    }
    let n_refine = budget / 4;
    let n_random = budget - n_refine;
    let mut cands: Vec<Vec<f64>> = seeds.iter().take(n_random).cloned().collect();
    while cands.len() < n_random {
        cands.push((0..dim).map(|_| rng.gen::<f64>()).collect());
    }
    let vals = acq(&cands)?;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for (v, c) in vals.into_iter().zip(cands) {
        if v.is_finite() && best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, c));
        }
    }
    let (mut bv, mut bx) =
        best.ok_or_else(|| AcquisitionError::Infeasible("all candidates non-finite".into()))?;
    let mut used = n_random;
    let mut step = 0.1;
    while used < budget && dim > 0 {
        let mut moves = Vec::new();
        'outer: for d in 0..dim {
            for s in [step, -step] {
                if used + moves.len() >= budget {
                    break 'outer;
                }
                let mut x = bx.clone();
                x[d] = (x[d] + s).clamp(0.0, 1.0);
                moves.push(x);
            }
        }
        used += moves.len();
        let vals = acq(&moves)?;
        let mut improved = false;
        for (v, x) in vals.into_iter().zip(moves) {
            if v.is_finite() && v > bv {
                bv = v;
                bx = x;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok(OptimizeResult {
        best: bx,
        value: bv,
        evaluations: used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;

    #[test]
    fn ei_examples() {
        assert_eq!(expected_improvement(2.0, 0.0, 2.0), 0.0);
        assert_relative_eq!(
            expected_improvement(1.0, 1.0, 0.0),
            1.0833154705876864,
            max_relative = 1e-12
        );
        assert_eq!(expected_improvement(3.0, 0.0, 1.0), 2.0);
        assert_eq!(expected_improvement(3.0, 2.0, f64::INFINITY), 0.0);
    }

    #[test]
    fn ei_monotone() {
        let mut prev = 0.0;
        for i in 0..200 {
            let v = expected_improvement(-2.0 + 0.02 * i as f64, 0.7, 0.0);
            assert!(v >= prev);
            prev = v;
        }
        let mut prev = 0.0;
        for i in 0..200 {
            let v = expected_improvement(-0.5, 0.01 * i as f64, 0.0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn lhs_stratifies_each_dimension() {
        let pts = latin_hypercube(7, 3, &mut rng::stream(1, &[]));
        for d in 0..3 {
            let mut bins: Vec<usize> = pts.iter().map(|p| (p[d] * 7.0) as usize).collect();
            bins.sort_unstable();
            assert_eq!(bins, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn decode_respects_bounds_and_spacing() {
        let space = ScheduleSpace::new(RecipeBounds::default(), 5.0, 4);
        let mut g = rng::stream(2, &[]);
        for _ in 0..5000 {
            let u: Vec<f64> = (0..space.dim()).map(|_| g.gen::<f64>()).collect();
            let c = space.decode(&u);
            assert!(space.bounds.contains(&c.recipe));
            assert!(c.is_feasible(0.0, 5.0, 4));
        }
        let run = space.decode(&vec![0.5; space.dim()]);
        let rem = ScheduleSpace::remaining(run.recipe, RecipeBounds::default(), 20.0, 5.0, 3);
        for _ in 0..2000 {
            let u: Vec<f64> = (0..rem.dim()).map(|_| g.gen::<f64>()).collect();
            let c = rem.decode(&u);
            assert!(c.recipe.t_stop <= run.recipe.t_stop && c.recipe.t_stop >= 20.0);
            assert!(c.is_feasible(20.0, 5.0, 3));
            assert_eq!(c.recipe.feed, run.recipe.feed);
        }
    }

    #[test]
    fn optimizer_finds_interior_optimum() {
        let c = [0.3, 0.7, 0.55, 0.2, 0.9, 0.45];
        let acq = |xs: &[Vec<f64>]| -> Result<Vec<f64>> {
            Ok(xs
                .iter()
                .map(|x| -x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .collect())
        };
        let r = optimize_acquisition(acq, 6, 2000, &[], &mut rng::stream(3, &[])).unwrap();
        assert_eq!(r.evaluations, 2000);
        for (x, y) in r.best.iter().zip(&c) {
            assert!((x - y).abs() < 0.02, "{:?}", r.best);
        }
        let r2 = optimize_acquisition(acq, 6, 2000, &[], &mut rng::stream(3, &[])).unwrap();
        assert_eq!(r, r2);
        assert!(matches!(
            optimize_acquisition(acq, 6, 0, &[], &mut rng::stream(3, &[])),
            Err(AcquisitionError::ZeroBudget)
        ));
    }

    /// Predictor returning fixed states regardless of inputs.
    struct Stub {
        state: Vec<f64>,
    }

    impl TrajectoryPredictor for Stub {
        fn predict_batch(
            &self,
            _context: &[ObservedTrajectory],
            queries: &[TrajectoryQuery],
            n_samples: usize,
            _rng: &mut Rng,
        ) -> std::result::Result<PredictiveBatch, SanodepError> {
            let per = |q: &TrajectoryQuery| vec![self.state.clone(); q.times.len()];
            Ok(PredictiveBatch {
                mean: queries.iter().map(per).collect(),
                variance: queries
                    .iter()
                    .map(|q| vec![vec![0.0; 4]; q.times.len()])
                    .collect(),
                samples: queries.iter().map(|q| vec![per(q); n_samples]).collect(),
            })
        }
    }

    #[test]
    fn stub_model_gives_hand_computed_improvement() {
        let stub = Stub {
            state: vec![10.0, 4.0, 0.0, 8.0],
        };
        let mut r = Recipe::nominal(0.5);
        r.feed = 10.0;
        let cand = ScheduleCandidate {
            recipe: r,
            times: vec![],
        };
        let c = ProfitCoefficients::default();
        // g = 0.025·4·8 - 168·0.5 - 8.5e-4·10·0.5 = 0.8 - 84 - 0.00425
        let g = 0.8 - 84.0 - 0.00425;
        let v = mc_acquisition(
            &stub,
            &[],
            std::slice::from_ref(&cand),
            true,
            g - 1.0,
            4,
            &c,
            &mut rng::stream(0, &[]),
        )
        .unwrap();
        assert_relative_eq!(v[0], 1.0, max_relative = 1e-9);
        let v = mc_acquisition(
            &stub,
            &[],
            std::slice::from_ref(&cand),
            true,
            g + 1.0,
            4,
            &c,
            &mut rng::stream(0, &[]),
        )
        .unwrap();
        assert_eq!(v[0], 0.0);
        let v = mc_acquisition(
            &stub,
            &[],
            &[cand],
            true,
            f64::INFINITY,
            4,
            &c,
            &mut rng::stream(0, &[]),
        )
        .unwrap();
        assert_eq!(v[0], 0.0);
    }
}
