//! Minimal dense linear algebra, activations, losses, and the optimizer
//! stack (Adam + global-norm clipping + exponential LR decay).
//!
//! Everything here is hand-rolled on `Vec<f64>`: the models are tiny and the
//! gradients are hand-derived per architecture, so there is no framework to
//! pull in. All training math runs in 64-bit floats.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Floor applied to probabilities before taking a log, so that a confident
/// wrong prediction yields a large finite loss instead of infinity.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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

    /// Build from nested rows. Panics if rows are ragged; test/construction helper.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged matrix rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// out += self · x. The hot path of every forward step.
    #[inline]
    pub fn matvec_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (w, xv) in row.iter().zip(x.iter()) {
                acc += w * xv;
            }
            out[i] += acc;
        }
    }

    /// out += selfᵀ · v, used by the backward passes.
    #[inline]
    pub fn matvec_transpose_add(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let vi = v[i];
            for (o, w) in out.iter_mut().zip(row.iter()) {
                *o += vi * w;
            }
        }
    }

    /// self += scale · a ⊗ b (outer product accumulation).
    #[inline]
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for i in 0..self.rows {
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            let ai = a[i] * scale;
            for (w, bv) in row.iter_mut().zip(b.iter()) {
                *w += ai * bv;
            }
        }
    }
}

/// A fully connected layer: `weights · x + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Mat,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        DenseLayer {
            weights: Mat::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols
    }

    /// `weights · x + bias`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.weights.cols {
            return Err(Error::Shape {
                context: "dense_forward input",
                expected: self.weights.cols,
                got: x.len(),
            });
        }
        if self.bias.len() != self.weights.rows {
            return Err(Error::Shape {
                context: "dense_forward bias",
                expected: self.weights.rows,
                got: self.bias.len(),
            });
        }
        let mut out = self.bias.clone();
        self.weights.matvec_add(x, &mut out);
        Ok(out)
    }
}

/// Numerically stabilized softmax (max subtraction, shift-invariant).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Shape {
            context: "softmax input",
            expected: 1,
            got: 0,
        });
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(out)
}

/// −ln(probs[label]), floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::Index(format!(
            "class label {} out of range for {} classes",
            label,
            probs.len()
        )));
    }
    Ok(-probs[label].max(PROB_FLOOR).ln())
}

/// Binary cross entropy against a sigmoid output, with the same floor.
pub fn binary_cross_entropy(p: f64, target: bool) -> f64 {
    if target {
        -p.max(PROB_FLOOR).ln()
    } else {
        -(1.0 - p).max(PROB_FLOOR).ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A parameter (or gradient) collection exposed as an ordered list of flat
/// tensors. The order is fixed per type so optimizer state stays aligned.
pub trait TensorSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Global L2 norm over every tensor in the set.
pub fn global_norm(set: &impl TensorSet) -> f64 {
    let mut sq = 0.0;
    for t in set.tensors() {
        for v in t {
            sq += v * v;
        }
    }
    sq.sqrt()
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
///
/// Returns the pre-clip norm. Gradients under the threshold are untouched,
/// which also makes the operation idempotent.
pub fn clip_gradients(grads: &mut impl TensorSet, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::Config(format!(
            "clip max_norm must be positive, got {max_norm}"
        )));
    }
    for t in grads.tensors() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient entry".into()));
        }
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.tensors_mut() {
            for v in t {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// Adam moment estimates plus step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zero moments shaped like `params`, with the standard defaults
    /// β1=0.9, β2=0.999, ε=1e-8.
    pub fn new_like(params: &impl TensorSet) -> Self {
        let m: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let v = m.clone();
        AdamState {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update with bias correction. Increments the step counter.
pub fn adam_step<P: TensorSet>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    {
        let p = params.tensors();
        let g = grads.tensors();
        if p.len() != state.m.len() || g.len() != p.len() {
            return Err(Error::Shape {
                context: "adam tensor count",
                expected: state.m.len(),
                got: p.len(),
            });
        }
        for (i, (pt, gt)) in p.iter().zip(g.iter()).enumerate() {
            if pt.len() != gt.len() || pt.len() != state.m[i].len() {
                return Err(Error::Shape {
                    context: "adam tensor length",
                    expected: state.m[i].len(),
                    got: pt.len(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let grads_t = grads.tensors();
    for (i, pt) in params.tensors_mut().into_iter().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let g = grads_t[i];
        for j in 0..pt.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            pt[j] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Exponential learning-rate decay: `base_rate · gamma^epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_rate: f64,
    pub gamma: f64,
    pub epoch: u32,
}

impl LrSchedule {
    pub fn new(base_rate: f64, gamma: f64) -> Self {
        LrSchedule {
            base_rate,
            gamma,
            epoch: 0,
        }
    }

    pub fn at_epoch(&self, epoch: u32) -> f64 {
        self.base_rate * self.gamma.powi(epoch as i32)
    }

    pub fn current(&self) -> f64 {
        self.at_epoch(self.epoch)
    }
}

/// Relative error used by the gradient checker.
#[inline]
pub fn gradient_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn flat_get(set: &impl TensorSet, mut idx: usize) -> f64 {
    for t in set.tensors() {
        if idx < t.len() {
            return t[idx];
        }
        idx -= t.len();
    }
    panic!("flat index out of range");
}

fn flat_add(set: &mut impl TensorSet, mut idx: usize, delta: f64) {
    for t in set.tensors_mut() {
        if idx < t.len() {
            t[idx] += delta;
            return;
        }
        idx -= t.len();
    }
    panic!("flat index out of range");
}

/// Compare an analytic gradient against central finite differences of `loss`.
///
/// For each flat parameter index in `indices` (all parameters when `None`)
/// the parameter is perturbed by ±epsilon, the loss re-evaluated, and the
/// relative error against the analytic entry recorded. Returns the maximum.
/// The loss closure must be deterministic (fix any dropout seed).
pub fn finite_difference_max_rel_error<P, F>(
    params: &mut P,
    analytic: &P,
    epsilon: f64,
    mut loss: F,
    indices: Option<&[usize]>,
) -> Result<f64>
where
    P: TensorSet,
    F: FnMut(&P) -> Result<f64>,
{
    let total = params.parameter_count();
    let all: Vec<usize>;
    let idxs: &[usize] = match indices {
        Some(v) => v,
        None => {
            all = (0..total).collect();
            &all
        }
    };
    let mut max_err = 0.0f64;
    for &i in idxs {
        flat_add(params, i, epsilon);
        let plus = loss(params)?;
        flat_add(params, i, -2.0 * epsilon);
        let minus = loss(params)?;
        flat_add(params, i, epsilon);
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = gradient_rel_error(flat_get(analytic, i), numeric);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
