//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse and returns the gradient with respect to the
//! parameters of a [`ParamSet`] as one flat vector. Batched data flows as
//! matrices with one row per example.

use std::io::{Read, Write};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec size");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Mat::from_vec(rows.len(), cols, data)
    }

    pub fn scalar(v: f64) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn same_shape(&self, o: &Mat) -> bool {
        self.rows == o.rows && self.cols == o.cols
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    fn add_assign(&mut self, o: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }
}

/// `c = beta·c + op(a)·op(b)` where `op` optionally transposes.
fn gemm(a: &Mat, ta: bool, b: &Mat, tb: bool, c: &mut Mat, beta: f64) {
    let (m, k) = if ta {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let n = if tb { b.rows } else { b.cols };
    debug_assert_eq!(c.rows, m);
    debug_assert_eq!(c.cols, n);
    let (rsa, csa) = if ta {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe the row-major buffers owned by `a`, `b` and `c`,
    // whose lengths match the (m, k), (k, n) and (m, n) shapes checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(a, false, b, false, &mut c, 0.0);
    c
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>, Vec<f64>),
    Sum(Var),
    GaussianNll { mean: Var, logvar: Var, target: Mat },
    KlDiag { mq: Var, lq: Var, mp: Var, lp: Var },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Parameter tensor `idx` of `params`.
    pub fn param(&mut self, params: &ParamSet, idx: usize) -> Var {
        let (r, c) = params.shape(idx);
        let m = Mat::from_vec(r, c, params.slice(idx).to_vec());
        self.push(m, Op::Param(idx))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul inner dimension");
        let c = matmul(av, bv);
        self.push(c, Op::MatMul(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(rv.rows == 1 && rv.cols == av.cols, "add_row shape");
        let mut out = av.clone();
        for r in out.data.chunks_mut(av.cols.max(1)) {
            for (x, b) in r.iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(
            av.same_shape(bv),
            "elementwise shape {}x{} vs {}x{}",
            av.rows,
            av.cols,
            bv.rows,
            bv.cols
        );
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale·a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        self.push(out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Multiplies row `i` of `a` by the constant `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Vec<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, s.len(), "scale_rows length");
        let mut out = av.clone();
        if av.cols > 0 {
            for (r, &k) in out.data.chunks_mut(av.cols).zip(&s) {
                r.iter_mut().for_each(|x| *x *= k);
            }
        }
        self.push(out, Op::ScaleRows(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols rows");
            for i in 0..rows {
                out.data[i * cols + off..i * cols + off + pv.cols].copy_from_slice(pv.row(i));
            }
            off += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows cols");
            data.extend_from_slice(&pv.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(
            Mat::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols, "slice_cols range");
        let w = end - start;
        let mut out = Mat::zeros(av.rows, w);
        for i in 0..av.rows {
            out.data[i * w..(i + 1) * w].copy_from_slice(&av.row(i)[start..end]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Row `i` of the result is row `idx[i]` of `a` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(idx.len(), av.cols);
        for (i, &j) in idx.iter().enumerate() {
            out.data[i * av.cols..(i + 1) * av.cols].copy_from_slice(av.row(j));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    /// Mean of the rows sharing each segment id; empty segments are an error.
    pub fn segment_mean(&mut self, a: Var, seg: Vec<usize>, n_seg: usize) -> Var {
        let av = self.value(a);
        assert_eq!(seg.len(), av.rows, "segment_mean ids");
        let mut counts = vec![0.0; n_seg];
        let mut out = Mat::zeros(n_seg, av.cols);
        for (i, &s) in seg.iter().enumerate() {
            counts[s] += 1.0;
            for (o, x) in out.data[s * av.cols..(s + 1) * av.cols]
                .iter_mut()
                .zip(av.row(i))
            {
                *o += x;
            }
        }
        assert!(
            counts.iter().all(|&c| c > 0.0),
            "segment_mean: empty segment"
        );
        if av.cols > 0 {
            for (r, &c) in out.data.chunks_mut(av.cols).zip(&counts) {
                r.iter_mut().for_each(|x| *x /= c);
            }
        }
        self.push(out, Op::SegmentMean(a, seg, counts))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum(a))
    }

    /// `-Σ log N(target | mean, exp(logvar))` with a shared `1 × 1` log-variance.
    pub fn gaussian_nll(&mut self, mean: Var, logvar: Var, target: Mat) -> Var {
        let (mv, lv) = (self.value(mean), self.value(logvar));
        assert!(
            mv.same_shape(&target) && lv.rows == 1 && lv.cols == 1,
            "gaussian_nll shape"
        );
        let lv = lv.data[0];
        let inv = (-lv).exp();
        let s: f64 = mv
            .data
            .iter()
            .zip(&target.data)
            .map(|(m, y)| 0.5 * ((y - m) * (y - m) * inv + lv + LN_2PI))
            .sum();
        self.push(
            Mat::scalar(s),
            Op::GaussianNll {
                mean,
                logvar,
                target,
            },
        )
    }

    /// `Σ KL(N(mq, e^lq) ‖ N(mp, e^lp))` over all entries.
    pub fn kl_diag(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
        let s = kl_diag_value(
            &self.value(mq).data,
            &self.value(lq).data,
            &self.value(mp).data,
            &self.value(lp).data,
        );
        self.push(Mat::scalar(s), Op::KlDiag { mq, lq, mp, lp })
    }

    /// Gradient of scalar node `loss` with respect to `params`, as a flat vector.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Result<Vec<f64>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut flat = vec![0.0; params.len()];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, d: Mat| match &mut grads[v.0] {
                Some(x) => x.add_assign(&d),
                slot => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(idx) => {
                    let off = params.offset(*idx);
                    for (f, d) in flat[off..off + g.data.len()].iter_mut().zip(&g.data) {
                        *f += d;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut da = Mat::zeros(av.rows, av.cols);
                    gemm(&g, false, bv, true, &mut da, 0.0);
                    let mut db = Mat::zeros(bv.rows, bv.cols);
                    gemm(av, true, &g, false, &mut db, 0.0);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::AddRow(a, r) => {
                    let mut dr = Mat::zeros(1, g.cols);
                    if g.cols > 0 {
                        for row in g.data.chunks(g.cols) {
                            for (d, x) in dr.data.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                    }
                    acc(*r, dr);
                    acc(*a, g);
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
                    );
                    let db = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect(),
                    );
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Affine(a, s) => acc(*a, g.map(|x| x * s)),
                Op::ScaleRows(a, s) => {
                    let mut d = g;
                    if d.cols > 0 {
                        for (r, &k) in d.data.chunks_mut(d.cols).zip(s) {
                            r.iter_mut().for_each(|x| *x *= k);
                        }
                    }
                    acc(*a, d);
                }
                Op::Tanh(a) => acc(*a, zip_map(&g, &node.value, |d, y| d * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(*a, zip_map(&g, &node.value, |d, y| d * y * (1.0 - y))),
                Op::Exp(a) => acc(*a, zip_map(&g, &node.value, |d, y| d * y)),
                Op::Log(a) => acc(*a, zip_map(&g, &self.nodes[a.0].value, |d, x| d / x)),
                Op::Softplus(a) => acc(
                    *a,
                    zip_map(&g, &self.nodes[a.0].value, |d, x| d * sigmoid(x)),
                ),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.cols;
                        let mut d = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            d.data[r * w..(r + 1) * w].copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        acc(p, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.data.len();
                        let pv = &self.nodes[p.0].value;
                        acc(
                            p,
                            Mat::from_vec(pv.rows, pv.cols, g.data[off..off + n].to_vec()),
                        );
                        off += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = &self.nodes[a.0].value;
                    let mut d = Mat::zeros(av.rows, av.cols);
                    for r in 0..g.rows {
                        d.data[r * av.cols + start..r * av.cols + start + g.cols]
                            .copy_from_slice(g.row(r));
                    }
                    acc(*a, d);
                }
                Op::GatherRows(a, idx) => {
                    let av = &self.nodes[a.0].value;
                    let mut d = Mat::zeros(av.rows, av.cols);
                    for (r, &j) in idx.iter().enumerate() {
                        for (x, y) in d.data[j * av.cols..(j + 1) * av.cols]
                            .iter_mut()
                            .zip(g.row(r))
                        {
                            *x += y;
                        }
                    }
                    acc(*a, d);
                }
                Op::SegmentMean(a, seg, counts) => {
                    let av = &self.nodes[a.0].value;
                    let mut d = Mat::zeros(av.rows, av.cols);
                    for (r, &s) in seg.iter().enumerate() {
                        for (x, y) in d.data[r * av.cols..(r + 1) * av.cols]
                            .iter_mut()
                            .zip(g.row(s))
                        {
                            *x = y / counts[s];
                        }
                    }
                    acc(*a, d);
                }
                Op::Sum(a) => {
                    let av = &self.nodes[a.0].value;
                    acc(
                        *a,
                        Mat::from_vec(av.rows, av.cols, vec![g.data[0]; av.data.len()]),
                    );
                }
                Op::GaussianNll {
                    mean,
                    logvar,
                    target,
                } => {
                    let gs = g.data[0];
                    let mv = &self.nodes[mean.0].value;
                    let lv = self.nodes[logvar.0].value.data[0];
                    let inv = (-lv).exp();
                    let mut dlv = 0.0;
                    let dm: Vec<f64> = mv
                        .data
                        .iter()
                        .zip(&target.data)
                        .map(|(m, y)| {
                            let r2 = (y - m) * (y - m) * inv;
                            dlv += 0.5 * (1.0 - r2);
                            -gs * (y - m) * inv
                        })
                        .collect();
                    acc(*mean, Mat::from_vec(mv.rows, mv.cols, dm));
                    acc(*logvar, Mat::scalar(gs * dlv));
                }
                Op::KlDiag { mq, lq, mp, lp } => {
                    let gs = g.data[0];
                    let (m1, l1, m2, l2) = (
                        &self.nodes[mq.0].value,
                        &self.nodes[lq.0].value,
                        &self.nodes[mp.0].value,
                        &self.nodes[lp.0].value,
                    );
                    let n = m1.data.len();
                    let (mut dmq, mut dlq, mut dmp, mut dlp) =
                        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                    for i in 0..n {
                        let ip = (-l2.data[i]).exp();
                        let dm = m1.data[i] - m2.data[i];
                        let vq = (l1.data[i] - l2.data[i]).exp();
                        dmq[i] = gs * dm * ip;
                        dmp[i] = -gs * dm * ip;
                        dlq[i] = gs * 0.5 * (vq - 1.0);
                        dlp[i] = gs * 0.5 * (1.0 - vq - dm * dm * ip);
                    }
                    let shape = |d: Vec<f64>| Mat::from_vec(m1.rows, m1.cols, d);
                    acc(*mq, shape(dmq));
                    acc(*lq, shape(dlq));
                    acc(*mp, shape(dmp));
                    acc(*lp, shape(dlp));
                }
            }
        }
        if flat.iter().all(|g| g.is_finite()) {
            Ok(flat)
        } else {
            Err(NeuralError::NonFiniteGradient)
        }
    }
}

fn zip_map(g: &Mat, v: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat::from_vec(
        g.rows,
        g.cols,
        g.data.iter().zip(&v.data).map(|(&a, &b)| f(a, b)).collect(),
    )
}

fn kl_diag_value(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    assert!(
        mq.len() == lq.len() && mq.len() == mp.len() && mq.len() == lp.len(),
        "kl_diag lengths"
    );
    (0..mq.len())
        .map(|i| {
            let u = lq[i] - lp[i];
            let dm = mq[i] - mp[i];
            // e^u - 1 - u >= 0, evaluated without cancellation near u = 0.
            0.5 * ((u.exp_m1() - u).max(0.0) + dm * dm * (-lp[i]).exp())
        })
        .sum()
}

/// Diagonal Gaussian `N(mean, diag(exp(logvar)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Self {
        assert_eq!(mean.len(), logvar.len(), "DiagGaussian lengths");
        DiagGaussian { mean, logvar }
    }

    pub fn standard(n: usize) -> Self {
        DiagGaussian::new(vec![0.0; n], vec![0.0; n])
    }

    pub fn variance(&self) -> Vec<f64> {
        self.logvar.iter().map(|l| l.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// `mean + exp(½·logvar) ⊙ noise`.
pub fn sample_reparam(q: &DiagGaussian, noise: &[f64]) -> Vec<f64> {
    assert_eq!(noise.len(), q.len(), "sample_reparam noise length");
    q.mean
        .iter()
        .zip(&q.logvar)
        .zip(noise)
        .map(|((m, l), e)| m + (0.5 * l).exp() * e)
        .collect()
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> f64 {
    kl_diag_value(&q.mean, &q.logvar, &p.mean, &p.logvar)
}

pub fn standard_normal(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Named parameter tensors backed by one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            shapes: Vec::new(),
            offsets: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Registers a tensor and returns its index.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Vec<f64>) -> usize {
        assert_eq!(init.len(), rows * cols, "ParamSet::add size for {name}");
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
        self.shapes.push((rows, cols));
        self.offsets.push(self.data.len());
        self.data.extend(init);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn n_tensors(&self) -> usize {
        self.names.len()
    }

    pub fn shape(&self, idx: usize) -> (usize, usize) {
        self.shapes[idx]
    }

    pub fn offset(&self, idx: usize) -> usize {
        self.offsets[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn slice(&self, idx: usize) -> &[f64] {
        let (r, c) = self.shapes[idx];
        &self.data[self.offsets[idx]..self.offsets[idx] + r * c]
    }

    pub fn slice_mut(&mut self, idx: usize) -> &mut [f64] {
        let (r, c) = self.shapes[idx];
        let o = self.offsets[idx];
        &mut self.data[o..o + r * c]
    }

    pub fn registry(&self) -> Vec<ParamShape> {
        self.names
            .iter()
            .zip(&self.shapes)
            .map(|(n, &(rows, cols))| ParamShape {
                name: n.clone(),
                rows,
                cols,
            })
            .collect()
    }

    pub fn from_registry(reg: &[ParamShape], data: Vec<f64>) -> Result<Self> {
        let mut p = ParamSet::new();
        let total: usize = reg.iter().map(|s| s.rows * s.cols).sum();
        if total != data.len() {
            return Err(NeuralError::Shape(format!(
                "registry needs {total} values, got {}",
                data.len()
            )));
        }
        let mut off = 0;
        for s in reg {
            let n = s.rows * s.cols;
            p.add(&s.name, s.rows, s.cols, data[off..off + n].to_vec());
            off += n;
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
}

/// Fully connected network; hidden layers use `activation`, the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<(usize, usize)>,
    activation: Activation,
    input_dim: usize,
    output_dim: usize,
}

/// An [`Mlp`] whose parameters are already on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    activation: Activation,
}

impl Mlp {
    /// Registers `prefix.{w,b}{i}` in `params` with fan-in scaled uniform weights and zero biases.
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "Mlp needs input and output sizes");
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let init: Vec<f64> = (0..w[0] * w[1])
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let wi = params.add(&format!("{prefix}.w{i}"), w[0], w[1], init);
            let bi = params.add(&format!("{prefix}.b{i}"), 1, w[1], vec![0.0; w[1]]);
            layers.push((wi, bi));
        }
        Mlp {
            layers,
            activation,
            input_dim: sizes[0],
            output_dim: *sizes.last().unwrap(),
        }
    }

    /// Rebuilds the layer layout from an existing parameter set.
    pub fn lookup(params: &ParamSet, prefix: &str, activation: Activation) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0.. {
            match (
                params.index_of(&format!("{prefix}.w{i}")),
                params.index_of(&format!("{prefix}.b{i}")),
            ) {
                (Some(w), Some(b)) => layers.push((w, b)),
                _ => break,
            }
        }
        if layers.is_empty() {
            return Err(NeuralError::Shape(format!("no layers for {prefix}")));
        }
        let input_dim = params.shape(layers[0].0).0;
        let output_dim = params.shape(layers.last().unwrap().0).1;
        Ok(Mlp {
            layers,
            activation,
            input_dim,
            output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Parameter index of the last layer's weight and bias.
    pub fn output_layer(&self) -> (usize, usize) {
        *self.layers.last().unwrap()
    }

    pub fn bind(&self, tape: &mut Tape, params: &ParamSet) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|&(w, b)| (tape.param(params, w), tape.param(params, b)))
                .collect(),
            activation: self.activation,
        }
    }

    /// Forward pass on a `batch × input_dim` matrix without recording gradients.
    pub fn forward(&self, params: &ParamSet, input: &Mat) -> Result<Mat> {
        if input.cols != self.input_dim {
            return Err(NeuralError::Shape(format!(
                "input has {} columns, expected {}",
                input.cols, self.input_dim
            )));
        }
        let mut x = input.clone();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (r, c) = params.shape(w);
            let mut y = Mat::zeros(x.rows, c);
            gemm(
                &x,
                false,
                &Mat::from_vec(r, c, params.slice(w).to_vec()),
                false,
                &mut y,
                0.0,
            );
            let bias = params.slice(b);
            for row in y.data.chunks_mut(c) {
                for (v, bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
            if i + 1 < self.layers.len() {
                y = match self.activation {
                    Activation::Tanh => y.map(f64::tanh),
                    Activation::Softplus => y.map(softplus),
                };
            }
            x = y;
        }
        Ok(x)
    }
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Var {
        let mut x = input;
        let n = self.layers.len();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let h = tape.matmul(x, w);
            x = tape.add_row(h, b);
            if i + 1 < n {
                x = match self.activation {
                    Activation::Tanh => tape.tanh(x),
                    Activation::Softplus => tape.softplus(x),
                };
            }
        }
        x
    }
}

/// Vector-input convenience wrapper around [`Mlp::forward`].
pub fn mlp_forward(mlp: &Mlp, params: &ParamSet, input: &[f64]) -> Result<Vec<f64>> {
    Ok(mlp
        .forward(params, &Mat::from_vec(1, input.len(), input.to_vec()))?
        .data)
}

/// Rescales `g` in place so its Euclidean norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

/// Adam optimiser state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<f64>,
    #[serde(skip)]
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One bias-corrected adaptive-moment update.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert!(
            params.len() == grads.len() && grads.len() == self.m.len(),
            "Adam shapes"
        );
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

const CKPT_MAGIC: &[u8; 8] = b"FBCKPT\0\x01";
pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    step: u64,
    registry: Vec<ParamShape>,
    optimizer: Option<Adam>,
    metadata: serde_json::Value,
}

/// Parameters, optional optimiser moments, step counter and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ParamSet,
    pub optimizer: Option<Adam>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA,
            step: self.step,
            registry: self.params.registry(),
            optimizer: self.optimizer.clone(),
            metadata: self.metadata.clone(),
        };
        let h = serde_json::to_vec(&header).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&(h.len() as u64).to_le_bytes())?;
        w.write_all(&h)?;
        let mut buf = Vec::with_capacity(8 * self.params.len() * 3);
        let moments = self.optimizer.iter().flat_map(|a| a.m.iter().chain(&a.v));
        for v in self.params.data.iter().chain(moments) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(NeuralError::Checkpoint("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut h = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut h)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&h).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        if header.schema_version != CHECKPOINT_SCHEMA {
            return Err(NeuralError::Checkpoint(format!(
                "unsupported schema {}",
                header.schema_version
            )));
        }
        let n: usize = header.registry.iter().map(|s| s.rows * s.cols).sum();
        let mut take = |k: usize| -> Result<Vec<f64>> {
            let mut b = vec![0u8; 8 * k];
            r.read_exact(&mut b)?;
            Ok(b.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let params = ParamSet::from_registry(&header.registry, take(n)?)?;
        let optimizer = match header.optimizer {
            Some(mut a) => {
                a.m = take(n)?;
                a.v = take(n)?;
                Some(a)
            }
            None => None,
        };
        Ok(Checkpoint {
            step: header.step,
            params,
            optimizer,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + eps;
            let fp = f(&xp);
            xp[i] = x[i] - eps;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * eps)
        })
        .collect()
}

/// Largest `|a-b| / max(|a|, |b|, floor)` over components.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;

    fn tiny_net(seed: u64) -> (ParamSet, Mlp) {
        let mut p = ParamSet::new();
        let mlp = Mlp::new(
            &mut p,
            "net",
            &[3, 5, 2],
            Activation::Tanh,
            &mut rng::stream(seed, &[]),
        );
        // Non-zero biases so their gradients are exercised too.
        let mut g = rng::stream(seed, &[1]);
        for v in p.data.iter_mut() {
            if *v == 0.0 {
                *v = g.gen_range(-0.5..0.5);
            }
        }
        (p, mlp)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let (mut p, mlp) = tiny_net(1);
        p.data.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(
            mlp_forward(&mlp, &p, &[1.0, -2.0, 3.0]).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn identity_linear_layer() {
        let mut p = ParamSet::new();
        let mlp = Mlp::new(
            &mut p,
            "lin",
            &[3, 3],
            Activation::Tanh,
            &mut rng::stream(0, &[]),
        );
        let w = p.index_of("lin.w0").unwrap();
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        p.slice_mut(w).copy_from_slice(&eye);
        assert_eq!(
            mlp_forward(&mlp, &p, &[0.3, -1.0, 2.0]).unwrap(),
            vec![0.3, -1.0, 2.0]
        );
    }

    #[test]
    fn forward_is_pure_and_matches_tape() {
        let (p, mlp) = tiny_net(2);
        let x = [0.1, 0.2, -0.7];
        let a = mlp_forward(&mlp, &p, &x).unwrap();
        assert_eq!(a, mlp_forward(&mlp, &p, &x).unwrap());
        let mut t = Tape::new();
        let b = mlp.bind(&mut t, &p);
        let xi = t.constant(Mat::from_vec(1, 3, x.to_vec()));
        let y = b.forward(&mut t, xi);
        assert_eq!(t.value(y).data, a);
        assert!(mlp_forward(&mlp, &p, &[1.0]).is_err());
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let (p, _) = tiny_net(3);
        let mut t = Tape::new();
        let mut total = None;
        for i in 0..p.n_tensors() {
            let v = t.param(&p, i);
            let sq = t.mul(v, v);
            let s = t.sum(sq);
            total = Some(match total {
                None => s,
                Some(acc) => t.add(acc, s),
            });
        }
        let loss = t.scale(total.unwrap(), 0.5);
        assert_eq!(t.backward(loss, &p).unwrap(), p.data);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (p, _) = tiny_net(4);
        let mut t = Tape::new();
        let c = t.constant(Mat::scalar(3.0));
        let _ = t.param(&p, 0);
        assert!(t.backward(c, &p).unwrap().iter().all(|&g| g == 0.0));
    }

    /// Exercises every primitive in one scalar loss.
    fn composite_loss(p: &ParamSet, mlp: &Mlp, t: &mut Tape) -> Var {
        let x = t.constant(Mat::from_vec(
            4,
            3,
            (0..12).map(|i| (i as f64 * 0.37).sin()).collect(),
        ));
        let net = mlp.bind(t, p);
        let h = net.forward(t, x);
        let mu = t.slice_cols(h, 0, 1);
        let raw = t.slice_cols(h, 1, 2);
        let sg = t.sigmoid(raw);
        let sg = t.affine(sg, 0.9, 0.1);
        let lsg = t.log(sg);
        let lv = t.scale(lsg, 2.0);
        let seg = t.segment_mean(mu, vec![0, 1, 0, 1], 2);
        let lseg = t.segment_mean(lv, vec![0, 0, 1, 1], 2);
        let zeros = t.constant(Mat::zeros(2, 1));
        let kl = t.kl_diag(seg, lseg, zeros, zeros);
        let g = t.gather_rows(h, vec![3, 0, 0]);
        let sp = t.softplus(g);
        let e = t.exp(sp);
        let e = t.scale_rows(e, vec![0.5, 1.0, 2.0]);
        let cc = t.concat_cols(&[e, g]);
        let cc = t.concat_rows(&[cc, cc]);
        let d = t.sub(e, g);
        let d = t.concat_rows(&[d, e]);
        let ds = t.sum(d);
        let lvar = t.slice_cols(lv, 0, 1);
        let lvar = t.gather_rows(lvar, vec![2]);
        let m = t.mul(e, e);
        let nll = t.gaussian_nll(
            m,
            lvar,
            Mat::from_vec(3, 2, vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]),
        );
        let s = t.sum(cc);
        let a = t.add(kl, nll);
        let a = t.add(a, ds);
        t.add(a, s)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (p, mlp) = tiny_net(5);
        let mut t = Tape::new();
        let loss = composite_loss(&p, &mlp, &mut t);
        let g = t.backward(loss, &p).unwrap();
        let f = |x: &[f64]| {
            let mut q = p.clone();
            q.data.copy_from_slice(x);
            let mut t = Tape::new();
            let l = composite_loss(&q, &mlp, &mut t);
            t.scalar_value(l)
        };
        let fd = finite_difference(f, &p.data, 1e-6);
        assert!(max_relative_error(&g, &fd, 1e-3) < 1e-4, "{g:?}\n{fd:?}");
    }

    #[test]
    fn reparam_examples() {
        let q = DiagGaussian::new(vec![1.0, -2.0], vec![0.0, 0.0]);
        assert_eq!(sample_reparam(&q, &[0.0, 0.0]), q.mean);
        assert_eq!(sample_reparam(&q, &[1.0, 1.0]), vec![2.0, -1.0]);
    }

    #[test]
    fn reparam_empirical_variance() {
        let q = DiagGaussian::new(vec![0.5], vec![0.7]);
        let mut g = rng::stream(6, &[]);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_reparam(&q, &standard_normal(1, &mut g))[0])
            .collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        assert!((v / 0.7f64.exp() - 1.0).abs() < 0.02, "variance {v}");
    }

    #[test]
    fn kl_examples() {
        let p = DiagGaussian::standard(1);
        let q = DiagGaussian::new(vec![1.0], vec![0.0]);
        assert_eq!(kl_diag(&p, &p), 0.0);
        assert_relative_eq!(kl_diag(&q, &p), 0.5, max_relative = 1e-15);
        let mut g = rng::stream(7, &[]);
        for _ in 0..1000 {
            let a = DiagGaussian::new(standard_normal(3, &mut g), standard_normal(3, &mut g));
            let b = DiagGaussian::new(standard_normal(3, &mut g), standard_normal(3, &mut g));
            assert!(kl_diag(&a, &b) >= 0.0);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut a = Adam::new(2, 0.1);
        a.m = vec![1.0, -1.0];
        a.v = vec![1.0, 1.0];
        let mut x = vec![3.0, 4.0];
        let before = x.clone();
        a.step(&mut x, &[0.0, 0.0]);
        assert_eq!(a.m, vec![0.9, -0.9]);
        // Non-zero stored moments still move the parameters; only fresh state is inert.
        let mut fresh = Adam::new(2, 0.1);
        let mut y = before.clone();
        fresh.step(&mut y, &[0.0, 0.0]);
        assert_eq!(y, before);
        assert!(x != before);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut a = Adam::new(1, 0.05);
        let mut x = vec![5.0];
        for _ in 0..500 {
            let g = [2.0 * (x[0] - 1.5)];
            a.step(&mut x, &g);
        }
        assert!((x[0] - 1.5).abs() < 1e-3, "{}", x[0]);
    }

    #[test]
    fn clipping_limits_norm() {
        let mut g = vec![30.0, 40.0];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 50.0);
        assert_relative_eq!(g[0], 6.0, max_relative = 1e-15);
        assert_relative_eq!(g[1], 8.0, max_relative = 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (p, _) = tiny_net(8);
        let mut a = Adam::new(p.len(), 1e-3);
        let mut q = p.clone();
        a.step(&mut q.data, &vec![0.1; p.len()]);
        let ck = Checkpoint {
            step: 17,
            params: q,
            optimizer: Some(a),
            metadata: serde_json::json!({"note": "x", "scale": 0.1f64 + 0.2f64}),
        };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(&buf[..]).unwrap();
        assert_eq!(back, ck);
        let bits = |c: &Checkpoint| {
            c.params
                .data
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&back), bits(&ck));
        assert!(Checkpoint::read(&b"garbage!........"[..]).is_err());
    }
}
