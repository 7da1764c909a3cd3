//! System-aware neural ODE process.
//!
//! Context observations `(t, x₀, x_t)` are encoded point-wise, mean-aggregated
//! and mapped to a Gaussian over the latent control signal `d`. Each trajectory
//! gets a Gaussian latent initial state from `(t₀, x₀)`. A neural vector field
//! conditioned on `(d, t, x₀)` evolves the latent state with unrolled RK4, and a
//! decoder maps latent states back to the observation space with a shared
//! learned noise variance.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::neural::{
    self, clip_grad_norm, Activation, Adam, BoundMlp, Checkpoint, DiagGaussian, Mat, Mlp,
    NeuralError, ParamSet, Tape, Var,
};
use crate::rng::{self, Rng};
use crate::tasking::{
    sample_system_with_retries, scenario_flip, Episode, EpisodeConfig, FamilySpec, Normalizer,
    ObservedTrajectory, SystemEpisodes, SystemFamily, TaskingError,
};

#[derive(Debug, Error)]
pub enum SanodepError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Tasking(#[from] TaskingError),
    #[error("context is empty")]
    EmptyContext,
    #[error("query time {t} precedes the initial time {t0}")]
    QueryBeforeStart { t: f64, t0: f64 },
    #[error("query times must be non-decreasing")]
    UnorderedTimes,
    #[error("non-finite latent state")]
    NonFiniteLatent,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("training aborted at step {step}: {diverged} of {total} systems diverged")]
    TrainingAbort {
        step: u64,
        diverged: usize,
        total: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SanodepError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SanodepConfig {
    pub n_l: usize,
    pub n_d: usize,
    /// Width of the per-point representation `r`.
    pub r_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub init_widths: Vec<usize>,
    pub ode_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub activation: Activation,
    /// Lower bound on posterior standard deviations.
    pub sigma_min: f64,
    pub decoder_logvar_init: f64,
    /// RK4 steps per normalised unit of time (the full horizon).
    pub ode_steps: usize,
    pub learning_rate: f64,
    pub steps: u64,
    pub grad_clip: f64,
    /// Reparameterised samples per episode.
    pub n_mc: usize,
    /// Fixed number of gradient partitions per step; results do not depend on thread count.
    pub grad_chunks: usize,
    pub checkpoint_every: u64,
    /// Abort when more than this fraction of a step's systems diverge.
    pub max_divergence_rate: f64,
    pub episodes: EpisodeConfig,
}

impl Default for SanodepConfig {
    fn default() -> Self {
        SanodepConfig {
            n_l: 16,
            n_d: 16,
            r_dim: 64,
            encoder_widths: vec![128, 128],
            init_widths: vec![128, 128],
            ode_widths: vec![128, 128],
            decoder_widths: vec![128, 128],
            activation: Activation::Tanh,
            sigma_min: 0.01,
            decoder_logvar_init: 0.01f64.ln(),
            ode_steps: 25,
            learning_rate: 1e-3,
            steps: 3000,
            grad_clip: 10.0,
            n_mc: 1,
            grad_chunks: 4,
            checkpoint_every: 500,
            max_divergence_rate: 0.5,
            episodes: EpisodeConfig::default(),
        }
    }
}

impl SanodepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SanodepError::InvalidConfig(m.to_string()));
        if self.n_l == 0 || self.n_d == 0 || self.r_dim == 0 {
            return bad("n_l, n_d and r_dim must be >= 1");
        }
        let widths = [
            &self.encoder_widths,
            &self.init_widths,
            &self.ode_widths,
            &self.decoder_widths,
        ];
        if widths.iter().any(|w| w.contains(&0)) {
            return bad("layer widths must be positive");
        }
        if self.ode_steps == 0 || self.n_mc == 0 || self.grad_chunks == 0 {
            return bad("ode_steps, n_mc and grad_chunks must be >= 1");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return bad("sigma_min must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.grad_clip > 0.0) {
            return bad("learning_rate and grad_clip must be positive");
        }
        self.episodes.validate()?;
        Ok(())
    }
}

/// Fixed reparameterisation noise for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeNoise {
    pub d: Vec<f64>,
    pub l: Vec<f64>,
}

impl EpisodeNoise {
    pub fn draw(n_d: usize, n_l: usize, rng: &mut Rng) -> Self {
        EpisodeNoise {
            d: neural::standard_normal(n_d, rng),
            l: neural::standard_normal(n_l, rng),
        }
    }
}

/// Summed loss components over a batch of episodes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub nll: f64,
    pub kl_d: f64,
    pub kl_l: f64,
    pub episodes: usize,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.nll + self.kl_d + self.kl_l
    }

    /// Negative ELBO averaged over episodes.
    pub fn mean(&self) -> f64 {
        self.total() / self.episodes.max(1) as f64
    }

    fn accumulate(&mut self, o: &LossParts) {
        self.nll += o.nll;
        self.kl_d += o.kl_d;
        self.kl_l += o.kl_l;
        self.episodes += o.episodes;
    }
}

/// Observation times and initial condition of one trajectory to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryQuery {
    pub condition: Vec<f64>,
    pub times: Vec<f64>,
    /// When set, the `(t₀, x₀, x₀)` triple of this query joins the shared context for its own `q(d)`.
    pub initial_state: Option<Vec<f64>>,
}

/// Per-query predictive summaries in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveBatch {
    /// `mean[q][i]`: mixture mean of the state at `times[i]` of query `q`.
    pub mean: Vec<Vec<Vec<f64>>>,
    /// Total variance: spread of sampled means plus the decoder noise.
    pub variance: Vec<Vec<Vec<f64>>>,
    /// `samples[q][s][i]`: decoded mean under latent sample `s`.
    pub samples: Vec<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SanodepModel {
    pub config: SanodepConfig,
    pub family: FamilySpec,
    pub normalizer: Normalizer,
    pub state_dim: usize,
    pub cond_dim: usize,
    pub params: ParamSet,
    encoder: Mlp,
    d_head: Mlp,
    l_head: Mlp,
    ode: Mlp,
    decoder: Mlp,
    logvar: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMetadata {
    config: SanodepConfig,
    family: FamilySpec,
    normalizer: Normalizer,
    state_dim: usize,
    cond_dim: usize,
    seed: u64,
}

fn sizes(input: usize, widths: &[usize], output: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend_from_slice(widths);
    v.push(output);
    v
}

/// Rows `[τ, cond, state]` of an observed trajectory, normalised.
fn point_rows(norm: &Normalizer, tr: &ObservedTrajectory) -> Vec<Vec<f64>> {
    let cond = norm.condition(&tr.condition);
    tr.points
        .iter()
        .map(|p| {
            let mut r = vec![norm.time(p.t)];
            r.extend_from_slice(&cond);
            r.extend(norm.state(&p.state));
            r
        })
        .collect()
}

fn column_sums(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    for i in 0..m.rows {
        for (o, x) in out.iter_mut().zip(m.row(i)) {
            *o += x;
        }
    }
    out
}

fn canonical_sort(rows: &mut [Vec<f64>]) {
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
}

fn row_key(r: &[f64]) -> Vec<u64> {
    r.iter().map(|v| v.to_bits()).collect()
}

/// Latent targets: `(row, τ)` pairs evaluated after the uniform RK4 sweep.
struct TargetPlan {
    rows: Vec<usize>,
    /// Index of the node each target starts from.
    base: Vec<usize>,
    /// Partial step from that node to the target time.
    h: Vec<f64>,
    node_times: Vec<f64>,
    taus: Vec<f64>,
}

impl TargetPlan {
    fn new(targets: &[(usize, f64)], steps_per_unit: usize) -> Self {
        let h = 1.0 / steps_per_unit as f64;
        let t_end = targets.iter().map(|t| t.1).fold(0.0, f64::max);
        let n_steps = (t_end / h - 1e-12).ceil().max(0.0) as usize;
        let node_times: Vec<f64> = (0..=n_steps).map(|i| i as f64 * h).collect();
        let mut plan = TargetPlan {
            rows: Vec::with_capacity(targets.len()),
            base: Vec::with_capacity(targets.len()),
            h: Vec::with_capacity(targets.len()),
            node_times,
            taus: Vec::with_capacity(targets.len()),
        };
        for &(row, tau) in targets {
            let mut b = ((tau / h).floor() as usize).min(n_steps);
            while b > 0 && plan.node_times[b] > tau {
                b -= 1;
            }
            plan.rows.push(row);
            plan.base.push(b);
            plan.h.push(tau - plan.node_times[b]);
            plan.taus.push(tau);
        }
        plan
    }

    fn n_steps(&self) -> usize {
        self.node_times.len() - 1
    }
}

/// Prepared tensors for the loss of a batch of episodes.
struct LossBatch {
    enc: Mat,
    ctx_rows: Vec<usize>,
    ctx_seg: Vec<usize>,
    full_seg: Vec<usize>,
    n_ep: usize,
    init: Mat,
    cond: Mat,
    targets: TargetPlan,
    target_states: Mat,
    eps_d: Mat,
    eps_l: Mat,
}

fn plain_concat_cols(parts: &[&Mat]) -> Mat {
    let rows = parts[0].rows;
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut off = 0;
    for p in parts {
        for i in 0..rows {
            out.data[i * cols + off..i * cols + off + p.cols].copy_from_slice(p.row(i));
        }
        off += p.cols;
    }
    out
}

fn plain_gather(a: &Mat, idx: &[usize]) -> Mat {
    let mut out = Mat::zeros(idx.len(), a.cols);
    for (i, &j) in idx.iter().enumerate() {
        out.data[i * a.cols..(i + 1) * a.cols].copy_from_slice(a.row(j));
    }
    out
}

/// `a + h_i·b` row-wise.
fn plain_axpy_rows(a: &Mat, b: &Mat, h: &[f64]) -> Mat {
    let mut out = a.clone();
    for (i, &hi) in h.iter().enumerate() {
        for (o, x) in out.data[i * a.cols..(i + 1) * a.cols]
            .iter_mut()
            .zip(b.row(i))
        {
            *o += hi * x;
        }
    }
    out
}

fn column(v: &[f64]) -> Mat {
    Mat::from_vec(v.len(), 1, v.to_vec())
}

impl SanodepModel {
    pub fn new(config: SanodepConfig, family: FamilySpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let fam = family.build();
        let (s, c) = (fam.state_dim(), fam.condition_dim());
        let normalizer = fam.normalizer();
        let mut params = ParamSet::new();
        let mut r = rng::stream(seed, &[u64::MAX]);
        let act = config.activation;
        let encoder = Mlp::new(
            &mut params,
            "encoder",
            &sizes(1 + c + s, &config.encoder_widths, config.r_dim),
            act,
            &mut r,
        );
        let d_head = Mlp::new(
            &mut params,
            "d_head",
            &[config.r_dim, 2 * config.n_d],
            act,
            &mut r,
        );
        let l_head = Mlp::new(
            &mut params,
            "l_head",
            &sizes(1 + c, &config.init_widths, 2 * config.n_l),
            act,
            &mut r,
        );
        let ode = Mlp::new(
            &mut params,
            "ode",
            &sizes(
                config.n_l + 1 + config.n_d + c,
                &config.ode_widths,
                config.n_l,
            ),
            act,
            &mut r,
        );
        let decoder = Mlp::new(
            &mut params,
            "decoder",
            &sizes(config.n_l + 1 + c, &config.decoder_widths, s),
            act,
            &mut r,
        );
        let logvar = params.add("decoder.logvar", 1, 1, vec![config.decoder_logvar_init]);
        Ok(SanodepModel {
            config,
            family,
            normalizer,
            state_dim: s,
            cond_dim: c,
            params,
            encoder,
            d_head,
            l_head,
            ode,
            decoder,
            logvar,
        })
    }

    fn from_parts(meta: ModelMetadata, params: ParamSet) -> Result<Self> {
        let act = meta.config.activation;
        let logvar = params
            .index_of("decoder.logvar")
            .ok_or_else(|| SanodepError::Metadata("missing decoder.logvar".into()))?;
        Ok(SanodepModel {
            encoder: Mlp::lookup(&params, "encoder", act)?,
            d_head: Mlp::lookup(&params, "d_head", act)?,
            l_head: Mlp::lookup(&params, "l_head", act)?,
            ode: Mlp::lookup(&params, "ode", act)?,
            decoder: Mlp::lookup(&params, "decoder", act)?,
            logvar,
            config: meta.config,
            family: meta.family,
            normalizer: meta.normalizer,
            state_dim: meta.state_dim,
            cond_dim: meta.cond_dim,
            params,
        })
    }

    /// Decoder observation variance in normalised units.
    pub fn noise_variance(&self) -> f64 {
        self.params.slice(self.logvar)[0].exp()
    }

    /// The vector field's output layer, for tests that zero it.
    pub fn ode_output_layer(&self) -> (usize, usize) {
        self.ode.output_layer()
    }

    // ---- loss -------------------------------------------------------------

    fn build_batch(&self, episodes: &[Episode], noise: &[EpisodeNoise]) -> LossBatch {
        assert_eq!(episodes.len(), noise.len(), "one noise draw per episode");
        let norm = &self.normalizer;
        let (mut enc, mut ctx_rows, mut ctx_seg, mut full_seg) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let (mut init, mut cond, mut targets, mut tstates) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (e, ep) in episodes.iter().enumerate() {
            let mut ctx: Vec<Vec<f64>> = ep
                .full_context()
                .iter()
                .flat_map(|t| point_rows(norm, t))
                .collect();
            canonical_sort(&mut ctx);
            let seen: HashSet<Vec<u64>> = ctx.iter().map(|r| row_key(r)).collect();
            let mut extra: Vec<Vec<f64>> = point_rows(norm, &ep.update_target)
                .into_iter()
                .filter(|r| !seen.contains(&row_key(r)))
                .collect();
            canonical_sort(&mut extra);
            for r in ctx {
                ctx_rows.push(enc.len());
                ctx_seg.push(e);
                full_seg.push(e);
                enc.push(r);
            }
            for r in extra {
                full_seg.push(e);
                enc.push(r);
            }
            let u = &ep.update_target;
            let c = norm.condition(&u.condition);
            let mut i0 = vec![norm.time(u.t0)];
            i0.extend_from_slice(&c);
            init.push(i0);
            cond.push(c);
            for p in &u.points {
                targets.push((e, norm.time(p.t)));
                tstates.push(norm.state(&p.state));
            }
        }
        LossBatch {
            enc: Mat::from_rows(&enc),
            ctx_rows,
            ctx_seg,
            full_seg,
            n_ep: episodes.len(),
            init: Mat::from_rows(&init),
            cond: Mat::from_rows(&cond),
            targets: TargetPlan::new(&targets, self.config.ode_steps),
            target_states: Mat::from_rows(&tstates),
            eps_d: Mat::from_rows(&noise.iter().map(|n| n.d.clone()).collect::<Vec<_>>()),
            eps_l: Mat::from_rows(&noise.iter().map(|n| n.l.clone()).collect::<Vec<_>>()),
        }
    }

    /// `(mean, std, logvar)` of a Gaussian head with `std ∈ (σ_min, 1)`.
    fn q_head_tape(
        &self,
        tape: &mut Tape,
        head: &BoundMlp,
        input: Var,
        n: usize,
    ) -> (Var, Var, Var) {
        let out = head.forward(tape, input);
        let mu = tape.slice_cols(out, 0, n);
        let raw = tape.slice_cols(out, n, 2 * n);
        let sg = tape.sigmoid(raw);
        let sd = tape.affine(sg, 1.0 - self.config.sigma_min, self.config.sigma_min);
        let ls = tape.log(sd);
        let lv = tape.scale(ls, 2.0);
        (mu, sd, lv)
    }

    fn ode_rk4_tape(
        &self,
        tape: &mut Tape,
        ode: &BoundMlp,
        l: Var,
        dc: Var,
        t: &[f64],
        h: &[f64],
    ) -> Var {
        let f = |tape: &mut Tape, l: Var, tt: Vec<f64>| {
            let tc = tape.constant(column(&tt));
            let x = tape.concat_cols(&[l, tc, dc]);
            ode.forward(tape, x)
        };
        let half: Vec<f64> = h.iter().map(|x| 0.5 * x).collect();
        let t_mid: Vec<f64> = t.iter().zip(&half).map(|(a, b)| a + b).collect();
        let t_end: Vec<f64> = t.iter().zip(h).map(|(a, b)| a + b).collect();
        let k1 = f(tape, l, t.to_vec());
        let s = tape.scale_rows(k1, half.clone());
        let l2 = tape.add(l, s);
        let k2 = f(tape, l2, t_mid.clone());
        let s = tape.scale_rows(k2, half);
        let l3 = tape.add(l, s);
        let k3 = f(tape, l3, t_mid);
        let s = tape.scale_rows(k3, h.to_vec());
        let l4 = tape.add(l, s);
        let k4 = f(tape, l4, t_end);
        let k23 = tape.add(k2, k3);
        let k23 = tape.scale(k23, 2.0);
        let k14 = tape.add(k1, k4);
        let ks = tape.add(k14, k23);
        let sixth: Vec<f64> = h.iter().map(|x| x / 6.0).collect();
        let inc = tape.scale_rows(ks, sixth);
        tape.add(l, inc)
    }

    /// Latent states at the planned targets (one row per target).
    fn evolve_tape(
        &self,
        tape: &mut Tape,
        ode: &BoundMlp,
        l0: Var,
        dc: Var,
        plan: &TargetPlan,
    ) -> Var {
        let r = tape.value(l0).rows;
        let h = 1.0 / self.config.ode_steps as f64;
        let mut nodes = vec![l0];
        for i in 0..plan.n_steps() {
            let l = *nodes.last().unwrap();
            let next =
                self.ode_rk4_tape(tape, ode, l, dc, &vec![plan.node_times[i]; r], &vec![h; r]);
            nodes.push(next);
        }
        let stacked = if nodes.len() == 1 {
            nodes[0]
        } else {
            tape.concat_rows(&nodes)
        };
        let idx: Vec<usize> = plan
            .base
            .iter()
            .zip(&plan.rows)
            .map(|(b, row)| b * r + row)
            .collect();
        let start = tape.gather_rows(stacked, idx);
        let dcg = tape.gather_rows(dc, plan.rows.clone());
        let t0: Vec<f64> = plan.base.iter().map(|&b| plan.node_times[b]).collect();
        self.ode_rk4_tape(tape, ode, start, dcg, &t0, &plan.h)
    }

    fn loss_tape(&self, tape: &mut Tape, b: &LossBatch) -> (Var, Var, Var) {
        let p = &self.params;
        let enc = self.encoder.bind(tape, p);
        let dh = self.d_head.bind(tape, p);
        let lh = self.l_head.bind(tape, p);
        let ode = self.ode.bind(tape, p);
        let dec = self.decoder.bind(tape, p);
        let logvar = tape.param(p, self.logvar);
        let (n_d, n_l) = (self.config.n_d, self.config.n_l);

        let x = tape.constant(b.enc.clone());
        let r = enc.forward(tape, x);
        let rc = tape.gather_rows(r, b.ctx_rows.clone());
        let rc = tape.segment_mean(rc, b.ctx_seg.clone(), b.n_ep);
        let rf = tape.segment_mean(r, b.full_seg.clone(), b.n_ep);
        let (mu_c, _, lv_c) = self.q_head_tape(tape, &dh, rc, n_d);
        let (mu_f, sd_f, lv_f) = self.q_head_tape(tape, &dh, rf, n_d);
        let kl_d = tape.kl_diag(mu_f, lv_f, mu_c, lv_c);
        let eps_d = tape.constant(b.eps_d.clone());
        let nd = tape.mul(sd_f, eps_d);
        let d = tape.add(mu_f, nd);

        let init = tape.constant(b.init.clone());
        let (mu_l, sd_l, lv_l) = self.q_head_tape(tape, &lh, init, n_l);
        let zeros = tape.constant(Mat::zeros(b.n_ep, n_l));
        let kl_l = tape.kl_diag(mu_l, lv_l, zeros, zeros);
        let eps_l = tape.constant(b.eps_l.clone());
        let nl = tape.mul(sd_l, eps_l);
        let l0 = tape.add(mu_l, nl);

        let cond = tape.constant(b.cond.clone());
        let dc = tape.concat_cols(&[d, cond]);
        let lt = self.evolve_tape(tape, &ode, l0, dc, &b.targets);
        let tcol = tape.constant(column(&b.targets.taus));
        let cg = tape.gather_rows(cond, b.targets.rows.clone());
        let din = tape.concat_cols(&[lt, tcol, cg]);
        let mean = dec.forward(tape, din);
        let nll = tape.gaussian_nll(mean, logvar, b.target_states.clone());
        (nll, kl_d, kl_l)
    }

    /// Summed negative-ELBO components of `episodes` under fixed noise.
    pub fn episode_loss(&self, episodes: &[Episode], noise: &[EpisodeNoise]) -> LossParts {
        let b = self.build_batch(episodes, noise);
        let mut tape = Tape::new();
        let (nll, kl_d, kl_l) = self.loss_tape(&mut tape, &b);
        LossParts {
            nll: tape.scalar_value(nll),
            kl_d: tape.scalar_value(kl_d),
            kl_l: tape.scalar_value(kl_l),
            episodes: episodes.len(),
        }
    }

    /// Loss components and the gradient of their sum with respect to `self.params`.
    pub fn loss_and_grad(
        &self,
        episodes: &[Episode],
        noise: &[EpisodeNoise],
    ) -> Result<(LossParts, Vec<f64>)> {
        let b = self.build_batch(episodes, noise);
        let mut tape = Tape::new();
        let (nll, kl_d, kl_l) = self.loss_tape(&mut tape, &b);
        let s = tape.add(nll, kl_d);
        let total = tape.add(s, kl_l);
        let grad = tape.backward(total, &self.params)?;
        Ok((
            LossParts {
                nll: tape.scalar_value(nll),
                kl_d: tape.scalar_value(kl_d),
                kl_l: tape.scalar_value(kl_l),
                episodes: episodes.len(),
            },
            grad,
        ))
    }

    // ---- inference ----------------------------------------------------------

    fn q_head_plain(&self, head: &Mlp, input: &Mat, n: usize) -> Result<(Mat, Mat)> {
        let out = head.forward(&self.params, input)?;
        let (mut mu, mut lv) = (Mat::zeros(out.rows, n), Mat::zeros(out.rows, n));
        let sm = self.config.sigma_min;
        for i in 0..out.rows {
            for j in 0..n {
                mu.data[i * n + j] = out.get(i, j);
                let raw = out.get(i, n + j);
                let sg = if raw >= 0.0 {
                    1.0 / (1.0 + (-raw).exp())
                } else {
                    raw.exp() / (1.0 + raw.exp())
                };
                lv.data[i * n + j] = 2.0 * ((1.0 - sm) * sg + sm).ln();
            }
        }
        Ok((mu, lv))
    }

    fn ode_rk4_plain(&self, l: &Mat, dc: &Mat, t: &[f64], h: &[f64]) -> Result<Mat> {
        let f = |l: &Mat, tt: Vec<f64>| {
            self.ode
                .forward(&self.params, &plain_concat_cols(&[l, &column(&tt), dc]))
        };
        let half: Vec<f64> = h.iter().map(|x| 0.5 * x).collect();
        let t_mid: Vec<f64> = t.iter().zip(&half).map(|(a, b)| a + b).collect();
        let t_end: Vec<f64> = t.iter().zip(h).map(|(a, b)| a + b).collect();
        let k1 = f(l, t.to_vec())?;
        let k2 = f(&plain_axpy_rows(l, &k1, &half), t_mid.clone())?;
        let k3 = f(&plain_axpy_rows(l, &k2, &half), t_mid)?;
        let k4 = f(&plain_axpy_rows(l, &k3, h), t_end)?;
        // Same association order as the taped version: (k1 + k4) + 2(k2 + k3).
        let ks: Vec<f64> = (0..k1.data.len())
            .map(|i| (k1.data[i] + k4.data[i]) + 2.0 * (k2.data[i] + k3.data[i]))
            .collect();
        let sixth: Vec<f64> = h.iter().map(|x| x / 6.0).collect();
        Ok(plain_axpy_rows(
            l,
            &Mat::from_vec(l.rows, l.cols, ks),
            &sixth,
        ))
    }

    fn evolve_plain(&self, l0: &Mat, dc: &Mat, plan: &TargetPlan) -> Result<Mat> {
        let r = l0.rows;
        let h = 1.0 / self.config.ode_steps as f64;
        let mut nodes = vec![l0.clone()];
        for i in 0..plan.n_steps() {
            let next = self.ode_rk4_plain(
                nodes.last().unwrap(),
                dc,
                &vec![plan.node_times[i]; r],
                &vec![h; r],
            )?;
            if !next.data.iter().all(|v| v.is_finite()) {
                return Err(SanodepError::NonFiniteLatent);
            }
            nodes.push(next);
        }
        let mut start = Mat::zeros(plan.rows.len(), l0.cols);
        for (i, (&b, &row)) in plan.base.iter().zip(&plan.rows).enumerate() {
            start.data[i * l0.cols..(i + 1) * l0.cols].copy_from_slice(nodes[b].row(row));
        }
        let t0: Vec<f64> = plan.base.iter().map(|&b| plan.node_times[b]).collect();
        let out = self.ode_rk4_plain(&start, &plain_gather(dc, &plan.rows), &t0, &plan.h)?;
        if out.data.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(SanodepError::NonFiniteLatent)
        }
    }

    /// `q(d | context)` and one `q(l₀ | t₀, x₀)` per context trajectory.
    pub fn encode(
        &self,
        context: &[ObservedTrajectory],
    ) -> Result<(DiagGaussian, Vec<DiagGaussian>)> {
        let mut rows: Vec<Vec<f64>> = context
            .iter()
            .flat_map(|t| point_rows(&self.normalizer, t))
            .collect();
        if rows.is_empty() {
            return Err(SanodepError::EmptyContext);
        }
        canonical_sort(&mut rows);
        let q_d = self.q_d(&rows)?;
        let q_l = context
            .iter()
            .map(|t| {
                let (m, lv) = self.q_l(&[(t.t0, t.condition.clone())])?;
                Ok(DiagGaussian::new(m.data, lv.data))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((q_d, q_l))
    }

    fn q_d(&self, sorted_rows: &[Vec<f64>]) -> Result<DiagGaussian> {
        let r = self
            .encoder
            .forward(&self.params, &Mat::from_rows(sorted_rows))?;
        let mean = Mat::from_vec(
            1,
            r.cols,
            column_sums(&r).iter().map(|m| m / r.rows as f64).collect(),
        );
        let (mu, lv) = self.q_head_plain(&self.d_head, &mean, self.config.n_d)?;
        Ok(DiagGaussian::new(mu.data, lv.data))
    }

    /// `q(d)` per query: the shared context plus, where given, the query's own initial triple.
    fn q_d_per_query(
        &self,
        rows: &[Vec<f64>],
        queries: &[TrajectoryQuery],
    ) -> Result<Vec<DiagGaussian>> {
        if queries.iter().all(|q| q.initial_state.is_none()) {
            if rows.is_empty() {
                return Err(SanodepError::EmptyContext);
            }
            let shared = self.q_d(rows)?;
            return Ok(vec![shared; queries.len()]);
        }
        let (base_sum, n_base) = if rows.is_empty() {
            (None, 0.0)
        } else {
            let r = self.encoder.forward(&self.params, &Mat::from_rows(rows))?;
            (Some(column_sums(&r)), r.rows as f64)
        };
        let mut agg = Vec::with_capacity(queries.len());
        for q in queries {
            let own = match &q.initial_state {
                Some(x0) => {
                    let mut row = vec![self.normalizer.time(0.0)];
                    row.extend(self.normalizer.condition(&q.condition));
                    row.extend(self.normalizer.state(x0));
                    Some(
                        self.encoder
                            .forward(&self.params, &Mat::from_rows(&[row]))?
                            .data,
                    )
                }
                None => None,
            };
            let (sum, n) = match (&base_sum, own) {
                (Some(b), Some(o)) => {
                    (b.iter().zip(&o).map(|(x, y)| x + y).collect(), n_base + 1.0)
                }
                (Some(b), None) => (b.clone(), n_base),
                (None, Some(o)) => (o, 1.0),
                (None, None) => return Err(SanodepError::EmptyContext),
            };
            agg.push(sum.into_iter().map(|v| v / n).collect::<Vec<f64>>());
        }
        let (mu, lv) = self.q_head_plain(&self.d_head, &Mat::from_rows(&agg), self.config.n_d)?;
        Ok((0..mu.rows)
            .map(|i| DiagGaussian::new(mu.row(i).to_vec(), lv.row(i).to_vec()))
            .collect())
    }

    fn q_l(&self, inits: &[(f64, Vec<f64>)]) -> Result<(Mat, Mat)> {
        let rows: Vec<Vec<f64>> = inits
            .iter()
            .map(|(t0, c)| {
                let mut r = vec![self.normalizer.time(*t0)];
                r.extend(self.normalizer.condition(c));
                r
            })
            .collect();
        self.q_head_plain(&self.l_head, &Mat::from_rows(&rows), self.config.n_l)
    }

    /// Latent trajectory from `l0` under control `d` at `times` (physical units, starting at t₀ = 0).
    pub fn evolve_latent(
        &self,
        l0: &[f64],
        d: &[f64],
        condition: &[f64],
        times: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        check_times(times)?;
        let mut dc = d.to_vec();
        dc.extend(self.normalizer.condition(condition));
        let targets: Vec<(usize, f64)> = times
            .iter()
            .map(|&t| (0, self.normalizer.time(t)))
            .collect();
        let plan = TargetPlan::new(&targets, self.config.ode_steps);
        let out = self.evolve_plain(
            &Mat::from_vec(1, l0.len(), l0.to_vec()),
            &Mat::from_vec(1, dc.len(), dc),
            &plan,
        )?;
        Ok((0..out.rows).map(|i| out.row(i).to_vec()).collect())
    }

    /// Decoder mean (normalised units) for a latent state at time `t`.
    pub fn decode(&self, latent: &[f64], condition: &[f64], t: f64) -> Result<DiagGaussian> {
        let mut x = latent.to_vec();
        x.push(self.normalizer.time(t));
        x.extend(self.normalizer.condition(condition));
        let mean = neural::mlp_forward(&self.decoder, &self.params, &x)?;
        let lv = self.params.slice(self.logvar)[0];
        Ok(DiagGaussian::new(mean, vec![lv; self.state_dim]))
    }

    /// Draws `n_samples` latent pairs `(d, l₀)`, shared across queries, and decodes every query.
    pub fn predict(
        &self,
        context: &[ObservedTrajectory],
        queries: &[TrajectoryQuery],
        n_samples: usize,
        rng: &mut Rng,
    ) -> Result<PredictiveBatch> {
        let mut rows: Vec<Vec<f64>> = context
            .iter()
            .flat_map(|t| point_rows(&self.normalizer, t))
            .collect();
        for q in queries {
            check_times(&q.times)?;
        }
        canonical_sort(&mut rows);
        let q_ds = self.q_d_per_query(&rows, queries)?;
        let (n_d, n_l, s_dim) = (self.config.n_d, self.config.n_l, self.state_dim);
        let eps: Vec<EpisodeNoise> = (0..n_samples)
            .map(|_| EpisodeNoise::draw(n_d, n_l, rng))
            .collect();
        let (mu_l, lv_l) = self.q_l(
            &queries
                .iter()
                .map(|q| (0.0, q.condition.clone()))
                .collect::<Vec<_>>(),
        )?;

        let n_rows = queries.len() * n_samples;
        let mut l0 = Mat::zeros(n_rows, n_l);
        let mut dc = Mat::zeros(n_rows, n_d + self.cond_dim);
        let mut targets = Vec::new();
        let mut dec_tail = Vec::new();
        for (qi, q) in queries.iter().enumerate() {
            let cond = self.normalizer.condition(&q.condition);
            let ql = DiagGaussian::new(mu_l.row(qi).to_vec(), lv_l.row(qi).to_vec());
            for (s, e) in eps.iter().enumerate().take(n_samples) {
                let row = qi * n_samples + s;
                l0.data[row * n_l..(row + 1) * n_l]
                    .copy_from_slice(&neural::sample_reparam(&ql, &e.l));
                let dr =
                    &mut dc.data[row * (n_d + self.cond_dim)..(row + 1) * (n_d + self.cond_dim)];
                dr[..n_d].copy_from_slice(&neural::sample_reparam(&q_ds[qi], &e.d));
                dr[n_d..].copy_from_slice(&cond);
                for &t in &q.times {
                    let tau = self.normalizer.time(t);
                    targets.push((row, tau));
                    let mut tail = vec![tau];
                    tail.extend_from_slice(&cond);
                    dec_tail.push(tail);
                }
            }
        }
        let plan = TargetPlan::new(&targets, self.config.ode_steps);
        let lt = self.evolve_plain(&l0, &dc, &plan)?;
        let means = self.decoder.forward(
            &self.params,
            &plain_concat_cols(&[&lt, &Mat::from_rows(&dec_tail)]),
        )?;

        let noise_var = self.noise_variance();
        let mut out = PredictiveBatch {
            mean: Vec::with_capacity(queries.len()),
            variance: Vec::with_capacity(queries.len()),
            samples: Vec::with_capacity(queries.len()),
        };
        let mut k = 0;
        for q in queries {
            let mut samples = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let traj: Vec<Vec<f64>> = (0..q.times.len())
                    .map(|_| {
                        let x = self.normalizer.state_inverse(means.row(k));
                        k += 1;
                        x
                    })
                    .collect();
                samples.push(traj);
            }
            let n = n_samples as f64;
            let mut mean = vec![vec![0.0; s_dim]; q.times.len()];
            let mut var = vec![vec![0.0; s_dim]; q.times.len()];
            for i in 0..q.times.len() {
                for j in 0..s_dim {
                    let m = samples.iter().map(|s| s[i][j]).sum::<f64>() / n;
                    let v = samples.iter().map(|s| (s[i][j] - m).powi(2)).sum::<f64>() / n;
                    mean[i][j] = m;
                    var[i][j] = v + noise_var * self.normalizer.state_scale[j].powi(2);
                }
            }
            out.mean.push(mean);
            out.variance.push(var);
            out.samples.push(samples);
        }
        Ok(out)
    }

    // ---- persistence --------------------------------------------------------

    pub fn to_checkpoint(
        &self,
        step: u64,
        optimizer: Option<Adam>,
        seed: u64,
    ) -> Result<Checkpoint> {
        let meta = ModelMetadata {
            config: self.config.clone(),
            family: self.family.clone(),
            normalizer: self.normalizer.clone(),
            state_dim: self.state_dim,
            cond_dim: self.cond_dim,
            seed,
        };
        Ok(Checkpoint {
            step,
            params: self.params.clone(),
            optimizer,
            metadata: serde_json::to_value(meta)
                .map_err(|e| SanodepError::Metadata(e.to_string()))?,
        })
    }

    /// Model, step, optimiser state and training seed stored in a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, u64, Option<Adam>, u64)> {
        let meta: ModelMetadata = serde_json::from_value(ck.metadata.clone())
            .map_err(|e| SanodepError::Metadata(e.to_string()))?;
        let seed = meta.seed;
        let model = Self::from_parts(meta, ck.params.clone())?;
        Ok((model, ck.step, ck.optimizer.clone(), seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_checkpoint(&Checkpoint::load(path)?)?.0)
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if let Some(&t) = times.iter().find(|&&t| t < 0.0) {
        return Err(SanodepError::QueryBeforeStart { t, t0: 0.0 });
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(SanodepError::UnorderedTimes);
    }
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss: f64,
    pub kl_d: f64,
    pub kl_l0: f64,
    pub nll: f64,
    pub grad_norm: f64,
    pub episodes: usize,
    pub diverged_systems: usize,
}

pub const TRAIN_LOG_HEADER: &str = "step,loss,kl_d,kl_l0,nll,grad_norm,episodes,diverged_systems";

impl TrainLogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{},{}",
            self.step,
            self.loss,
            self.kl_d,
            self.kl_l0,
            self.nll,
            self.grad_norm,
            self.episodes,
            self.diverged_systems
        )
    }
}

pub fn write_train_log<W: Write>(mut w: W, rows: &[TrainLogRow]) -> std::io::Result<()> {
    writeln!(w, "{TRAIN_LOG_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Episodic meta-training state.
pub struct Trainer {
    pub model: SanodepModel,
    pub optimizer: Adam,
    pub step: u64,
    pub seed: u64,
    family: Box<dyn SystemFamily>,
}

impl Trainer {
    pub fn new(model: SanodepModel, seed: u64) -> Self {
        let optimizer = Adam::new(model.params.len(), model.config.learning_rate);
        let family = model.family.build();
        Trainer {
            model,
            optimizer,
            step: 0,
            seed,
            family,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model, step, opt, seed) = SanodepModel::from_checkpoint(ck)?;
        let optimizer =
            opt.unwrap_or_else(|| Adam::new(model.params.len(), model.config.learning_rate));
        let family = model.family.build();
        Ok(Trainer {
            model,
            optimizer,
            step,
            seed,
            family,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.model
            .to_checkpoint(self.step, Some(self.optimizer.clone()), self.seed)
    }

    /// Episodes and their noise for training step `step`.
    pub fn step_episodes(
        &self,
        step: u64,
        exec: Execution,
    ) -> Result<(Vec<Episode>, Vec<EpisodeNoise>, usize)> {
        let cfg = &self.model.config;
        let ep = &cfg.episodes;
        let fam = self.family.as_ref();
        let seed = self.seed;
        let per_system = exec.map_range(
            ep.n_sys,
            |s| -> Result<Option<(Vec<Episode>, Vec<EpisodeNoise>)>> {
                let sample = match sample_system_with_retries(fam, ep, seed, &[step, s as u64]) {
                    Ok(x) => x,
                    Err(TaskingError::TooManyDivergences { .. }) => return Ok(None),
                    Err(e) => return Err(e.into()),
                };
                let mut r = rng::stream(seed, &[step, s as u64, 1]);
                let sys = SystemEpisodes::new(ep, sample, &mut r)?;
                let mut eps = Vec::new();
                let mut noise = Vec::new();
                for k in 0..ep.n_x0 {
                    let sc = scenario_flip(ep.lambda, &mut r);
                    let episode = sys.episode(ep, k, sc, &mut r);
                    let mut nr = rng::stream(seed, &[step, s as u64, k as u64, 2]);
                    for _ in 0..cfg.n_mc {
                        eps.push(episode.clone());
                        noise.push(EpisodeNoise::draw(cfg.n_d, cfg.n_l, &mut nr));
                    }
                }
                Ok(Some((eps, noise)))
            },
        );
        let mut episodes = Vec::new();
        let mut noise = Vec::new();
        let mut diverged = 0;
        for r in per_system {
            match r? {
                Some((e, n)) => {
                    episodes.extend(e);
                    noise.extend(n);
                }
                None => diverged += 1,
            }
        }
        Ok((episodes, noise, diverged))
    }

    /// Mean loss and gradient over a batch, partitioned into a fixed number of chunks.
    pub fn batch_gradient(
        &self,
        episodes: &[Episode],
        noise: &[EpisodeNoise],
        exec: Execution,
    ) -> Result<(LossParts, Vec<f64>)> {
        let n = episodes.len();
        let chunks = self.model.config.grad_chunks.min(n).max(1);
        let bounds: Vec<(usize, usize)> = (0..chunks)
            .map(|c| (c * n / chunks, (c + 1) * n / chunks))
            .collect();
        let parts = exec.map(&bounds, |&(a, b)| {
            self.model.loss_and_grad(&episodes[a..b], &noise[a..b])
        });
        let mut total = LossParts::default();
        let mut grad = vec![0.0; self.model.params.len()];
        for p in parts {
            let (lp, g) = p?;
            total.accumulate(&lp);
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / n.max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok((total, grad))
    }

    /// One Algorithm-1 step: sample systems and episodes, average the loss, clip, update.
    pub fn step_once(&mut self, exec: Execution) -> Result<TrainLogRow> {
        let step = self.step;
        let n_sys = self.model.config.episodes.n_sys;
        let (episodes, noise, diverged) = self.step_episodes(step, exec)?;
        if diverged as f64 > self.model.config.max_divergence_rate * n_sys as f64
            || episodes.is_empty()
        {
            return Err(SanodepError::TrainingAbort {
                step,
                diverged,
                total: n_sys,
            });
        }
        let (parts, mut grad) = self.batch_gradient(&episodes, &noise, exec)?;
        if !parts.total().is_finite() {
            return Err(SanodepError::NonFiniteLoss { step });
        }
        let grad_norm = clip_grad_norm(&mut grad, self.model.config.grad_clip);
        self.optimizer.step(&mut self.model.params.data, &grad);
        self.step += 1;
        let e = parts.episodes as f64;
        Ok(TrainLogRow {
            step,
            loss: parts.mean(),
            kl_d: parts.kl_d / e,
            kl_l0: parts.kl_l / e,
            nll: parts.nll / e,
            grad_norm,
            episodes: parts.episodes,
            diverged_systems: diverged,
        })
    }

    /// Trains until `self.step == steps`, calling `on_step` after every update.
    pub fn train_until(
        &mut self,
        steps: u64,
        exec: Execution,
        mut on_step: impl FnMut(&Trainer, &TrainLogRow) -> Result<()>,
    ) -> Result<Vec<TrainLogRow>> {
        let mut log = Vec::new();
        while self.step < steps {
            let row = self.step_once(exec)?;
            on_step(self, &row)?;
            log.push(row);
        }
        Ok(log)
    }
}

/// Builds and meta-trains a model for `config.steps` steps.
pub fn train(
    config: SanodepConfig,
    family: FamilySpec,
    seed: u64,
    exec: Execution,
) -> Result<(SanodepModel, Vec<TrainLogRow>)> {
    let steps = config.steps;
    let mut t = Trainer::new(SanodepModel::new(config, family, seed)?, seed);
    let log = t.train_until(steps, exec, |_, _| Ok(()))?;
    Ok((t.model, log))
}
