//! Numerically stable vector kernels shared by every objective.
//!
//! Vectors are plain `f64` slices. All functions are pure.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::domain("Matrix::from_vec", "dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::from_vec",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · x` for a column vector `x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    /// `out += selfᵀ · y`.
    pub fn mul_vec_transposed_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), out);
            }
        }
    }

    /// `self += alpha · u vᵀ`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let a = alpha * ur;
            if a != 0.0 {
                axpy(a, v, self.row_mut(r));
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale_in_place(alpha: f64, x: &mut [f64]) {
    for v in x {
        *v *= alpha;
    }
}

fn check_same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            op,
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::domain(op, "vectors must have dimension >= 1"));
    }
    Ok(())
}

/// Returns `(unit vector, original norm)`; zero vectors are rejected.
pub fn l2_normalize(op: &'static str, a: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = norm(a);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::domain(op, format!("vector has degenerate norm {n}")));
    }
    Ok((a.iter().map(|v| v / n).collect(), n))
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same_len("cosine_similarity", a, b)?;
    let na = norm(a);
    let nb = norm(b);
    if !(na > 0.0) {
        return Err(Error::domain("cosine_similarity", "first argument has zero norm"));
    }
    if !(nb > 0.0) {
        return Err(Error::domain("cosine_similarity", "second argument has zero norm"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Partial derivatives of `cos(a, b)` given unit vectors and the original norms.
///
/// Accumulates `scale · ∂cos/∂a` into `grad_a` and `scale · ∂cos/∂b` into `grad_b`.
pub(crate) fn cosine_grad_acc(
    unit_a: &[f64],
    norm_a: f64,
    unit_b: &[f64],
    norm_b: f64,
    cos: f64,
    scale: f64,
    grad_a: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    if scale == 0.0 {
        return;
    }
    if let Some(ga) = grad_a {
        let s = scale / norm_a;
        for ((g, &ub), &ua) in ga.iter_mut().zip(unit_b).zip(unit_a) {
            *g += s * (ub - cos * ua);
        }
    }
    if let Some(gb) = grad_b {
        let s = scale / norm_b;
        for ((g, &ua), &ub) in gb.iter_mut().zip(unit_a).zip(unit_b) {
            *g += s * (ua - cos * ub);
        }
    }
}

/// Chain rule through `x ↦ x / ‖x‖`: maps a gradient w.r.t. the unit vector
/// into a gradient w.r.t. `x`.
pub(crate) fn unnormalize_grad(unit: &[f64], norm_x: f64, grad_unit: &[f64], out: &mut [f64]) {
    let proj = dot(grad_unit, unit);
    for ((o, &g), &u) in out.iter_mut().zip(grad_unit).zip(unit) {
        *o += (g - proj * u) / norm_x;
    }
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same_len("squared_euclidean", a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `(argmax, max, Σ_{k≠argmax} exp(z_k − max))` for a nonempty, finite-max input.
fn shifted_exp_sum(op: &'static str, logits: &[f64]) -> Result<(usize, f64, f64)> {
    if logits.is_empty() {
        return Err(Error::domain(op, "empty input"));
    }
    let (arg, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (k, z)| if z > acc.1 { (k, z) } else { acc });
    if !max.is_finite() {
        return Err(Error::domain(op, format!("non-finite logit {max}")));
    }
    let rest = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != arg)
        .map(|(_, &z)| (z - max).exp())
        .sum();
    Ok((arg, max, rest))
}

pub fn log_sum_exp(logits: &[f64]) -> Result<f64> {
    let (_, max, rest) = shifted_exp_sum("log_sum_exp", logits)?;
    Ok(max + rest.ln_1p())
}

/// Cross-entropy of `softmax(logits)` against a one-hot target.
///
/// Returns the loss and its gradient w.r.t. the logits,
/// `softmax(logits) − one_hot(target)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::domain(
            "softmax_cross_entropy",
            format!("target {target} out of range for {} logits", logits.len()),
        ));
    }
    let (_, max, rest) = shifted_exp_sum("softmax_cross_entropy", logits)?;
    let log_norm = rest.ln_1p();
    // target holds the max: offset is exactly zero
    let loss = ((max - logits[target]) + log_norm).max(0.0);
    let mut grad: Vec<f64> = logits.iter().map(|&z| ((z - max) - log_norm).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}
