//! Scalar helpers, compensated accumulators, and small dense linear algebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Logistic sigmoid, evaluated without overflow for either sign of `u`.
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(u))`.
pub fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// Max-shifted log-sum-exp. Returns `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Kahan-Babuska (Neumaier) compensated scalar sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Coordinate-wise compensated accumulator for vectors (and flattened matrices).
#[derive(Debug, Clone)]
pub struct KahanVec {
    parts: Vec<KahanSum>,
}

impl KahanVec {
    pub fn zeros(len: usize) -> Self {
        Self {
            parts: vec![KahanSum::new(); len],
        }
    }

    /// Adds `scale * v`.
    pub fn add_scaled(&mut self, scale: f64, v: &[f64]) {
        debug_assert_eq!(v.len(), self.parts.len());
        for (acc, x) in self.parts.iter_mut().zip(v) {
            acc.add(scale * x);
        }
    }

    pub fn to_vector(&self) -> Vector {
        Vector::from_iterator(self.parts.len(), self.parts.iter().map(KahanSum::value))
    }

    pub fn to_matrix(&self, n: usize) -> Matrix {
        debug_assert_eq!(n * n, self.parts.len());
        Matrix::from_iterator(n, n, self.parts.iter().map(KahanSum::value))
    }
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn sym_min_eigenvalue(m: &Matrix) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Spectral norm of the symmetric part of `m`.
pub fn sym_spectral_norm(m: &Matrix) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power iteration.
///
/// Starts from the all-ones direction plus a small ramp so that no eigenvector is
/// orthogonal to the start for generic inputs.
pub fn power_iteration(m: &Matrix, max_iters: usize, tol: f64) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = Vector::from_iterator(n, (0..n).map(|i| 1.0 + 0.1 * i as f64));
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..max_iters {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - estimate).abs() <= tol * next.abs().max(1.0) {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Central finite differences.
pub mod fd {
    use super::{Matrix, Vector};

    /// Default step: `1e-5 * max(1, ||x||)`.
    pub fn default_step(x: &Vector) -> f64 {
        1e-5 * x.norm().max(1.0)
    }

    /// Central-difference gradient of a scalar function.
    pub fn gradient<F>(f: F, x: &Vector, step: f64) -> Vector
    where
        F: Fn(&Vector) -> f64,
    {
        let mut out = Vector::zeros(x.len());
        let mut probe = x.clone();
        for i in 0..x.len() {
            probe[i] = x[i] + step;
            let plus = f(&probe);
            probe[i] = x[i] - step;
            let minus = f(&probe);
            probe[i] = x[i];
            out[i] = (plus - minus) / (2.0 * step);
        }
        out
    }

    /// Central-difference Jacobian of a vector-valued map (column `j` is `d g / d x_j`).
    pub fn jacobian<G>(g: G, x: &Vector, step: f64) -> Matrix
    where
        G: Fn(&Vector) -> Vector,
    {
        let n = x.len();
        let mut out = Matrix::zeros(n, n);
        let mut probe = x.clone();
        for j in 0..n {
            probe[j] = x[j] + step;
            let plus = g(&probe);
            probe[j] = x[j] - step;
            let minus = g(&probe);
            probe[j] = x[j];
            let col = (plus - minus) / (2.0 * step);
            out.set_column(j, &col);
        }
        out
    }
}
