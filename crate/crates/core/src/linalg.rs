//! Dense symmetric positive-definite factorizations.
//!
//! Every `K⁻¹ v` product in the crate goes through [`CholeskyFactor`]
//! triangular solves; nothing inverts a covariance directly except where a
//! full inverse is genuinely required (trace terms), and then it is formed
//! from the triangular factor.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal inflation schedule used when a covariance is numerically singular.
///
/// The first attempt already adds `initial_relative · mean(diag K)`; each
/// failure multiplies the jitter by `growth`, up to `max_escalations` times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub initial_relative: f64,
    pub growth: f64,
    pub max_escalations: usize,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            initial_relative: 1e-8,
            growth: 10.0,
            max_escalations: 8,
        }
    }
}

/// Lower-triangular factor `L` with `L Lᵀ = A + jitter·I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
    jitter: f64,
    escalations: usize,
}

impl CholeskyFactor {
    /// Wraps an existing lower-triangular factor (no jitter recorded).
    pub fn from_lower(l: DMatrix<f64>) -> Self {
        assert!(l.is_square(), "factor must be square");
        Self {
            l,
            jitter: 0.0,
            escalations: 0,
        }
    }

    /// Plain factorization without any jitter.
    pub fn exact(a: &DMatrix<f64>) -> Result<Self> {
        match try_factor(a, 0.0) {
            Some(l) => Ok(Self::from_lower(l)),
            None => Err(Error::FactorizationFailure {
                escalations: 0,
                jitter: 0.0,
            }),
        }
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Absolute diagonal inflation that was added before factorizing.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Number of times the jitter had to be increased past its initial value.
    pub fn escalations(&self) -> usize {
        self.escalations
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L⁻¹ b`
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        x
    }

    /// `L⁻¹ B`
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        x
    }

    /// `L⁻ᵀ b`
    pub fn solve_upper(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// `(L Lᵀ)⁻¹ b`
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// `L v`
    pub fn mul_lower(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut out = DVector::zeros(n);
        let ls = self.l.as_slice();
        // column-oriented so the inner loop is contiguous
        for k in 0..n {
            let vk = v[k];
            if vk == 0.0 {
                continue;
            }
            let col = &ls[k * n + k..(k + 1) * n];
            for (o, lv) in out.as_mut_slice()[k..].iter_mut().zip(col) {
                *o += vk * lv;
            }
        }
        out
    }

    /// `L⁻¹`, lower triangular.
    pub fn inverse_lower(&self) -> DMatrix<f64> {
        let n = self.dim();
        let ls = self.l.as_slice();
        let mut x = DMatrix::<f64>::zeros(n, n);
        let xs = x.as_mut_slice();
        for j in 0..n {
            let col = &mut xs[j * n..(j + 1) * n];
            col[j] = 1.0;
            for k in j..n {
                let xk = col[k] / ls[k * n + k];
                col[k] = xk;
                if xk != 0.0 {
                    let lcol = &ls[k * n + k + 1..(k + 1) * n];
                    for (c, lv) in col[k + 1..].iter_mut().zip(lcol) {
                        *c -= xk * lv;
                    }
                }
            }
        }
        x
    }

    /// `(L Lᵀ)⁻¹`, formed as `L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let linv = self.inverse_lower();
        linv.tr_mul(&linv)
    }

    /// `L Lᵀ`
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

fn try_factor(a: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let mut m = a.clone();
    if jitter != 0.0 {
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
    }
    let chol = Cholesky::new(m)?;
    let l = chol.unpack();
    if l.iter().all(|v| v.is_finite()) && l.diagonal().iter().all(|&d| d > 0.0) {
        Some(l)
    } else {
        None
    }
}

/// Factorizes a symmetric matrix, inflating its diagonal until it succeeds.
///
/// Only the lower triangle of `k` is read.
pub fn cholesky_with_jitter(k: &DMatrix<f64>, policy: &JitterPolicy) -> Result<CholeskyFactor> {
    if !k.is_square() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    let n = k.nrows();
    let mean_diag = if n == 0 {
        0.0
    } else {
        k.diagonal().sum() / n as f64
    };
    // a zero matrix still needs a positive floor
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut jitter = policy.initial_relative * scale;
    for escalation in 0..=policy.max_escalations {
        if let Some(l) = try_factor(k, jitter) {
            return Ok(CholeskyFactor {
                l,
                jitter,
                escalations: escalation,
            });
        }
        if escalation < policy.max_escalations {
            jitter *= policy.growth;
        }
    }
    Err(Error::FactorizationFailure {
        escalations: policy.max_escalations,
        jitter,
    })
}

/// Largest absolute asymmetry `|A_ij − A_ji|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}
