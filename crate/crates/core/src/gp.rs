//! Exact zero-mean GP regression with an ARD squared-exponential kernel.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Recipe, RecipeBounds};
use crate::neural::Adam;
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("kernel matrix not positive definite after jitter {jitter:e}")]
    FitFailed { jitter: f64 },
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, GpError>;

/// Relative jitter ladder applied to the signal variance.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl GpHyperparams {
    pub fn isotropic(
        dim: usize,
        lengthscale: f64,
        signal_variance: f64,
        noise_variance: f64,
    ) -> Self {
        GpHyperparams {
            lengthscales: vec![lengthscale; dim],
            signal_variance,
            noise_variance,
        }
    }

    fn to_log(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        v.push(self.signal_variance.ln());
        v.push(self.noise_variance.max(f64::MIN_POSITIVE).ln());
        v
    }

    fn from_log(v: &[f64]) -> Self {
        let d = v.len() - 2;
        GpHyperparams {
            lengthscales: v[..d].iter().map(|x| x.exp()).collect(),
            signal_variance: v[d].exp(),
            noise_variance: v[d + 1].exp(),
        }
    }
}

/// `σ_f² · exp(-½ Σ_d ((a_d - b_d)/ℓ_d)²)`.
pub fn rbf_kernel(a: &[f64], b: &[f64], hyper: &GpHyperparams) -> f64 {
    debug_assert_eq!(a.len(), hyper.lengthscales.len());
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(&hyper.lengthscales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    hyper.signal_variance * (-0.5 * r2).exp()
}

/// Recipe plus observation time mapped to `[0, 1]⁶` as `[B0, P0, S0, V0, F, t/t_max]`.
pub fn recipe_input(recipe: &Recipe, t: f64, bounds: &RecipeBounds, t_max: f64) -> Vec<f64> {
    let u = bounds.to_unit(recipe);
    vec![u[0], u[1], u[2], u[3], u[4], t / t_max]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    pub restarts: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Noise floor relative to the sample variance of `y`.
    pub noise_floor: f64,
    pub lengthscale_range: (f64, f64),
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            restarts: 5,
            steps: 200,
            learning_rate: 0.05,
            noise_floor: 1e-9,
            lengthscale_range: (1e-2, 1e2),
        }
    }
}

/// Fitted GP with cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyper: GpHyperparams,
    pub x: Vec<Vec<f64>>,
    /// Centred targets.
    pub y: Vec<f64>,
    pub y_mean: f64,
    /// Jitter added to the diagonal on top of the noise.
    pub jitter: f64,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
}

fn kernel_matrix(x: &[Vec<f64>], hyper: &GpHyperparams) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = rbf_kernel(&x[i], &x[j], hyper);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `K + (σ_n² + jitter)I`, escalating jitter along [`JITTER_LADDER`].
fn factor(k: &DMatrix<f64>, hyper: &GpHyperparams) -> Result<(DMatrix<f64>, f64)> {
    let n = k.nrows();
    let mut last = 0.0;
    for rel in JITTER_LADDER {
        let jitter = rel * hyper.signal_variance;
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += hyper.noise_variance + jitter;
        }
        if let Some(c) = a.cholesky() {
            return Ok((c.unpack(), jitter));
        }
        last = jitter;
    }
    Err(GpError::FitFailed { jitter: last })
}

fn check_dims(x: &[Vec<f64>], y: &[f64], hyper: &GpHyperparams) -> Result<()> {
    if x.len() != y.len() {
        return Err(GpError::Dimension(format!(
            "{} inputs vs {} targets",
            x.len(),
            y.len()
        )));
    }
    if let Some(bad) = x.iter().find(|r| r.len() != hyper.lengthscales.len()) {
        return Err(GpError::Dimension(format!(
            "input of length {} vs {} lengthscales",
            bad.len(),
            hyper.lengthscales.len()
        )));
    }
    Ok(())
}

fn solve_lower(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = b.len();
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[(i, j)] * b[j];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Log marginal likelihood and its gradient with respect to
/// `[ln ℓ_1..ℓ_d, ln σ_f², ln σ_n²]`.
pub fn log_marginal_likelihood(
    x: &[Vec<f64>],
    y_centred: &[f64],
    hyper: &GpHyperparams,
) -> Result<(f64, Vec<f64>)> {
    check_dims(x, y_centred, hyper)?;
    let n = x.len();
    let d = hyper.lengthscales.len();
    let k = kernel_matrix(x, hyper);
    let (l, _) = factor(&k, hyper)?;
    let chol = nalgebra::Cholesky::pack_dirty(l.clone());
    let yv = DVector::from_column_slice(y_centred);
    let alpha = chol.solve(&yv);
    let logdet: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    let mll = -0.5 * yv.dot(&alpha) - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // W = ααᵀ - K⁻¹; dMLL/dθ = ½ tr(W ∂K/∂θ).
    let kinv = chol.inverse();
    let w = &alpha * alpha.transpose() - kinv;
    let mut grad = vec![0.0; d + 2];
    for i in 0..n {
        for j in 0..n {
            let wk = w[(i, j)] * k[(i, j)];
            grad[d] += wk;
            for (dd, l) in hyper.lengthscales.iter().enumerate() {
                let diff = (x[i][dd] - x[j][dd]) / l;
                grad[dd] += wk * diff * diff;
            }
        }
        grad[d + 1] += w[(i, i)] * hyper.noise_variance;
    }
    grad.iter_mut().for_each(|g| *g *= 0.5);
    Ok((mll, grad))
}

impl GpModel {
    /// Conditions a GP with fixed hyperparameters on `(x, y)`; `y` is centred internally.
    pub fn new(x: Vec<Vec<f64>>, y: &[f64], hyper: GpHyperparams) -> Result<Self> {
        check_dims(&x, y, &hyper)?;
        if x.is_empty() {
            return Err(GpError::TooFewPoints { need: 1, got: 0 });
        }
        let y_mean = y.iter().sum::<f64>() / y.len() as f64;
        let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
        let k = kernel_matrix(&x, &hyper);
        let (chol, jitter) = factor(&k, &hyper)?;
        let alpha =
            nalgebra::Cholesky::pack_dirty(chol.clone()).solve(&DVector::from_column_slice(&yc));
        Ok(GpModel {
            hyper,
            x,
            y: yc,
            y_mean,
            jitter,
            chol,
            alpha,
        })
    }

    pub fn dim(&self) -> usize {
        self.hyper.lengthscales.len()
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let logdet: f64 = (0..self.len()).map(|i| self.chol[(i, i)].ln()).sum();
        -0.5 * DVector::from_column_slice(&self.y).dot(&self.alpha)
            - logdet
            - 0.5 * self.len() as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    /// Predictive mean and latent-function variance at `query`.
    pub fn posterior(&self, query: &[f64]) -> (f64, f64) {
        assert_eq!(query.len(), self.dim(), "posterior query dimension");
        let mut kv: Vec<f64> = self
            .x
            .iter()
            .map(|xi| rbf_kernel(xi, query, &self.hyper))
            .collect();
        let mean = self.y_mean
            + kv.iter()
                .zip(self.alpha.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        solve_lower(&self.chol, &mut kv);
        let var = self.hyper.signal_variance - kv.iter().map(|v| v * v).sum::<f64>();
        (mean, var.max(0.0))
    }

    /// Writes inputs, targets and hyperparameters as CSV for offline inspection.
    pub fn dump_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim()).map(|d| format!("x{d}")).collect();
        header.push("y".into());
        wr.write_record(&header)?;
        for (xi, yi) in self.x.iter().zip(&self.y) {
            let mut rec: Vec<String> = xi.iter().map(|v| format!("{v:e}")).collect();
            rec.push(format!("{:e}", yi + self.y_mean));
            wr.write_record(&rec)?;
        }
        let mut rec: Vec<String> = self
            .hyper
            .lengthscales
            .iter()
            .map(|v| format!("lengthscale={v:e}"))
            .collect();
        rec.push(format!(
            "signal_variance={:e};noise_variance={:e}",
            self.hyper.signal_variance, self.hyper.noise_variance
        ));
        wr.write_record(&rec)?;
        wr.flush()?;
        Ok(())
    }
}

/// Maximises the log marginal likelihood from `init` plus `restarts - 1` random
/// starts and returns the conditioned model at the best hyperparameters seen.
pub fn fit(
    x: Vec<Vec<f64>>,
    y: &[f64],
    init: &GpHyperparams,
    settings: &FitSettings,
    rng: &mut Rng,
) -> Result<GpModel> {
    check_dims(&x, y, init)?;
    if x.len() < 2 {
        return Err(GpError::TooFewPoints {
            need: 2,
            got: x.len(),
        });
    }
    let n = y.len() as f64;
    let y_mean = y.iter().sum::<f64>() / n;
    let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let y_var = (yc.iter().map(|v| v * v).sum::<f64>() / n).max(1e-12);
    let d = init.lengthscales.len();
    let lo_noise = (settings.noise_floor * y_var).ln();
    let (ll, lh) = (
        settings.lengthscale_range.0.ln(),
        settings.lengthscale_range.1.ln(),
    );
    let clamp = |v: &mut [f64]| {
        for x in v[..d].iter_mut() {
            *x = x.clamp(ll, lh);
        }
        v[d] = v[d].clamp((1e-6 * y_var).ln(), (1e6 * y_var).ln());
        v[d + 1] = v[d + 1].clamp(lo_noise, (y_var).ln());
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for r in 0..settings.restarts.max(1) {
        let mut theta = if r == 0 {
            init.to_log()
        } else {
            let mut t: Vec<f64> = (0..d)
                .map(|_| rng.gen_range(0.05f64.ln()..2.0f64.ln()))
                .collect();
            t.push((y_var * rng.gen_range(0.5..2.0)).ln());
            t.push(lo_noise + rng.gen_range(0.0..3.0));
            t
        };
        clamp(&mut theta);
        let mut adam = Adam::new(theta.len(), settings.learning_rate);
        for step in 0..=settings.steps {
            let h = GpHyperparams::from_log(&theta);
            let Ok((mll, grad)) = log_marginal_likelihood(&x, &yc, &h) else {
                break;
            };
            if mll.is_finite() && best.as_ref().is_none_or(|(b, _)| mll > *b) {
                best = Some((mll, theta.clone()));
            }
            if step == settings.steps || !grad.iter().all(|g| g.is_finite()) {
                break;
            }
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            adam.step(&mut theta, &neg);
            clamp(&mut theta);
        }
    }
    let theta = best.map(|b| b.1).ok_or(GpError::FitFailed {
        jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })?;
    GpModel::new(x, y, GpHyperparams::from_log(&theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{finite_difference, max_relative_error, standard_normal};
    use crate::rng;
    use approx::assert_relative_eq;

    fn random_data(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut g = rng::stream(seed, &[]);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| g.gen::<f64>()).collect())
            .collect();
        let y = x
            .iter()
            .map(|r| (3.0 * r[0]).sin() + r.iter().sum::<f64>())
            .collect();
        (x, y)
    }

    #[test]
    fn kernel_examples() {
        let h = GpHyperparams::isotropic(2, 1.0, 1.0, 0.0);
        assert_eq!(rbf_kernel(&[0.3, 0.4], &[0.3, 0.4], &h), 1.0);
        assert_relative_eq!(
            rbf_kernel(&[0.0, 0.0], &[1.0, 1.0], &h),
            0.36787944117144233,
            max_relative = 1e-15
        );
        let h = GpHyperparams {
            lengthscales: vec![0.2, 3.0],
            signal_variance: 2.5,
            noise_variance: 0.0,
        };
        assert_eq!(
            rbf_kernel(&[0.1, 0.9], &[0.7, 0.2], &h),
            rbf_kernel(&[0.7, 0.2], &[0.1, 0.9], &h)
        );
        assert_eq!(rbf_kernel(&[0.1, 0.9], &[0.1, 0.9], &h), 2.5);
    }

    #[test]
    fn interpolates_noise_free_data() {
        let (x, y) = random_data(15, 3, 1);
        let m = GpModel::new(x.clone(), &y, GpHyperparams::isotropic(3, 0.5, 1.0, 0.0)).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!((m.posterior(xi).0 - yi).abs() < 1e-6);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let (x, y) = random_data(10, 2, 2);
        let h = GpHyperparams::isotropic(2, 0.3, 1.7, 1e-6);
        let m = GpModel::new(x, &y, h).unwrap();
        let (mu, var) = m.posterior(&[5.0, 5.0]);
        assert!((mu - m.y_mean).abs() < 1e-6);
        assert!((var - 1.7).abs() < 1e-6);
        let (_, v_train) = m.posterior(&m.x[0].clone());
        assert!(v_train <= var);
    }

    #[test]
    fn mll_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (x, y) = random_data(12, 3, 10 + seed);
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
            let h = GpHyperparams {
                lengthscales: vec![0.4, 0.7, 1.3],
                signal_variance: 0.8,
                noise_variance: 1e-2,
            };
            let (_, g) = log_marginal_likelihood(&x, &yc, &h).unwrap();
            let fd = finite_difference(
                |t| {
                    log_marginal_likelihood(&x, &yc, &GpHyperparams::from_log(t))
                        .unwrap()
                        .0
                },
                &h.to_log(),
                1e-5,
            );
            assert!(max_relative_error(&g, &fd, 1e-3) < 1e-4, "{g:?} vs {fd:?}");
        }
    }

    #[test]
    fn fit_never_loses_likelihood() {
        let (x, y) = random_data(20, 2, 3);
        let init = GpHyperparams::isotropic(2, 0.5, 1.0, 1e-4);
        let s = FitSettings::default();
        let m = fit(x.clone(), &y, &init, &s, &mut rng::stream(1, &[])).unwrap();
        let again = fit(x.clone(), &y, &m.hyper, &s, &mut rng::stream(2, &[])).unwrap();
        assert!(again.log_marginal_likelihood() >= m.log_marginal_likelihood() - 1e-8);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
        let start = log_marginal_likelihood(&x, &yc, &init).unwrap().0;
        for seed in 0..5 {
            let single = FitSettings { restarts: 1, ..s };
            let m = fit(x.clone(), &y, &init, &single, &mut rng::stream(seed, &[])).unwrap();
            assert!(m.log_marginal_likelihood() >= start);
        }
    }

    #[test]
    fn recovers_known_lengthscale() {
        let n = 64;
        let mut g = rng::stream(4, &[]);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![g.gen::<f64>()]).collect();
        let truth = GpHyperparams::isotropic(1, 0.3, 1.0, 0.0);
        let mut k = kernel_matrix(&x, &truth);
        for i in 0..n {
            k[(i, i)] += 1e-8;
        }
        let l = k.cholesky().unwrap().unpack();
        let z = DVector::from_vec(standard_normal(n, &mut g));
        let y: Vec<f64> = (l * z).iter().copied().collect();
        let m = fit(
            x,
            &y,
            &GpHyperparams::isotropic(1, 1.0, 1.0, 1e-4),
            &FitSettings::default(),
            &mut g,
        )
        .unwrap();
        let ls = m.hyper.lengthscales[0];
        assert!(ls > 0.15 && ls < 0.6, "lengthscale {ls}");
    }

    #[test]
    fn mean_is_linear_in_y() {
        let (x, y) = random_data(10, 2, 5);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
        let h = GpHyperparams::isotropic(2, 0.4, 1.0, 1e-6);
        let a = GpModel::new(x.clone(), &yc, h.clone()).unwrap();
        let y3: Vec<f64> = yc.iter().map(|v| 3.0 * v).collect();
        let b = GpModel::new(x, &y3, h).unwrap();
        let q = [0.25, 0.6];
        assert_relative_eq!(
            b.posterior(&q).0,
            3.0 * a.posterior(&q).0,
            max_relative = 1e-9
        );
    }

    #[test]
    fn extra_observation_never_increases_variance() {
        let (x, y) = random_data(8, 2, 6);
        let h = GpHyperparams::isotropic(2, 0.4, 1.0, 1e-6);
        let a = GpModel::new(x[..7].to_vec(), &y[..7], h.clone()).unwrap();
        let b = GpModel::new(x.clone(), &y, h).unwrap();
        let mut g = rng::stream(7, &[]);
        for _ in 0..200 {
            let q = [g.gen::<f64>(), g.gen::<f64>()];
            assert!(b.posterior(&q).1 <= a.posterior(&q).1 + 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let h = GpHyperparams::isotropic(2, 0.4, 1.0, 1e-6);
        assert!(matches!(
            fit(
                vec![vec![0.1, 0.2]],
                &[1.0],
                &h,
                &FitSettings::default(),
                &mut rng::stream(0, &[])
            ),
            Err(GpError::TooFewPoints { .. })
        ));
        assert!(GpModel::new(vec![vec![0.1]], &[1.0], h).is_err());
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let (x, y) = random_data(4, 2, 8);
        let m = GpModel::new(x, &y, GpHyperparams::isotropic(2, 0.4, 1.0, 1e-6)).unwrap();
        let mut buf = Vec::new();
        m.dump_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("x0,x1,y\n"));
        assert_eq!(s.lines().count(), 6);
    }
}
