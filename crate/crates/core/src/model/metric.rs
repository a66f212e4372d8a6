//! Fisher metrics for the latent block and for the log-weights.

use nalgebra::{DMatrix, DVector};

use super::{prior_neg_hessian_theta, HyperState, PriorConfig};
use crate::error::Result;
use crate::kernels::{ClassCovariance, GramSet};
use crate::linalg::CholeskyFactor;

/// `G = K⁻¹ + W(π)` over the concatenated latent vector, where `W` couples the
/// classes of each subject through `diag(π_i) − π_i π_iᵀ`.
#[derive(Debug, Clone)]
pub struct LatentMetric {
    g: DMatrix<f64>,
    factor: CholeskyFactor,
}

impl LatentMetric {
    /// `precisions` holds `K_c⁻¹` per class; `probs` is `n × m`.
    pub fn new(precisions: &[DMatrix<f64>], probs: &DMatrix<f64>) -> Result<Self> {
        let (n, m) = probs.shape();
        let mut g = DMatrix::zeros(m * n, m * n);
        for (c, p) in precisions.iter().enumerate() {
            g.view_mut((c * n, c * n), (n, n)).copy_from(p);
        }
        for i in 0..n {
            for c in 0..m {
                let pc = probs[(i, c)];
                g[(c * n + i, c * n + i)] += pc;
                for r in 0..m {
                    g[(c * n + i, r * n + i)] -= pc * probs[(i, r)];
                }
            }
        }
        let factor = CholeskyFactor::exact(&g)?;
        Ok(Self { g, factor })
    }

    pub fn from_covariances(covs: &[ClassCovariance], probs: &DMatrix<f64>) -> Result<Self> {
        let precisions: Vec<_> = covs.iter().map(|c| c.factor.inverse()).collect();
        Self::new(&precisions, probs)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    pub fn into_factor(self) -> CholeskyFactor {
        self.factor
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.g * v
    }

    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(v)
    }

    pub fn log_det(&self) -> f64 {
        self.factor.log_det()
    }

    /// The `m × m` blocks of `G⁻¹` linking the classes of each subject.
    pub fn subject_inverse_blocks(&self, m: usize) -> Vec<DMatrix<f64>> {
        let dim = self.g.nrows();
        let n = dim / m;
        let linv = self.factor.inverse_lower();
        let ls = linv.as_slice();
        // (G⁻¹)_ab = Σ_k Linv_ka Linv_kb, and column a of Linv starts at row a
        let entry = |a: usize, b: usize| -> f64 {
            let start = a.max(b);
            let ca = &ls[a * dim + start..(a + 1) * dim];
            let cb = &ls[b * dim + start..(b + 1) * dim];
            ca.iter().zip(cb).map(|(x, y)| x * y).sum()
        };
        (0..n)
            .map(|i| {
                let mut block = DMatrix::zeros(m, m);
                for c in 0..m {
                    for r in 0..=c {
                        let v = entry(c * n + i, r * n + i);
                        block[(c, r)] = v;
                        block[(r, c)] = v;
                    }
                }
                block
            })
            .collect()
    }
}

/// Every subject gets the same class probabilities.
pub fn homogeneous_probs(freqs: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, freqs.len(), |_, c| freqs[c])
}

/// `½ Tr(G⁻¹ ∂G/∂f_k)` for every latent coordinate `k`.
pub fn fisher_log_det_gradient(blocks: &[DMatrix<f64>], probs: &DMatrix<f64>) -> DVector<f64> {
    let (n, m) = probs.shape();
    let mut out = DVector::zeros(m * n);
    for (i, b) in blocks.iter().enumerate() {
        let pi = probs.row(i).transpose();
        let bpi = b * &pi;
        let pbp = pi.dot(&bpi);
        let mean_diag: f64 = (0..m).map(|a| pi[a] * b[(a, a)]).sum();
        for c in 0..m {
            let t = pi[c] * (b[(c, c)] - mean_diag) - 2.0 * pi[c] * (bpi[c] - pbp);
            out[c * n + i] = 0.5 * t;
        }
    }
    out
}

/// `uᵀ (∂G/∂f_k) u` for every latent coordinate `k`.
pub fn fisher_quad_gradient(u: &DVector<f64>, probs: &DMatrix<f64>) -> DVector<f64> {
    let (n, m) = probs.shape();
    let mut out = DVector::zeros(m * n);
    for i in 0..n {
        let ubar: f64 = (0..m).map(|b| probs[(i, b)] * u[b * n + i]).sum();
        let u2bar: f64 = (0..m).map(|b| probs[(i, b)] * u[b * n + i].powi(2)).sum();
        for c in 0..m {
            let uc = u[c * n + i];
            out[c * n + i] = probs[(i, c)] * (uc * uc - u2bar - 2.0 * ubar * (uc - ubar));
        }
    }
    out
}

/// Per-class `q × q` Fisher metric of the log-weights,
/// `½ w_r w_j Tr(K⁻¹ C̃_r K⁻¹ C̃_j)`, with `C̃` the jittered Gram as in the
/// gradient.
pub fn metric_theta(covs: &[ClassCovariance], grams: &GramSet) -> Vec<DMatrix<f64>> {
    let q = grams.q();
    let n = grams.n();
    covs.iter()
        .map(|cov| {
            let a: Vec<DMatrix<f64>> = (0..q)
                .map(|j| {
                    let mut cj = grams.get(j).clone();
                    let shift = cov.relative_jitter * grams.mean_diag(j);
                    for d in 0..n {
                        cj[(d, d)] += shift;
                    }
                    cov.factor.solve_mat(&cj)
                })
                .collect();
            let mut g = DMatrix::zeros(q, q);
            for r in 0..q {
                for j in 0..=r {
                    // Tr(A_r A_j) = Σ A_r ∘ A_jᵀ
                    let mut tr = 0.0;
                    for x in 0..n {
                        for y in 0..n {
                            tr += a[r][(x, y)] * a[j][(y, x)];
                        }
                    }
                    let v = 0.5 * cov.weights[r] * cov.weights[j] * tr;
                    g[(r, j)] = v;
                    g[(j, r)] = v;
                }
            }
            g
        })
        .collect()
}

/// Block-diagonal `mq × mq` mass: per-class `G_θ` plus the negative Hessian of
/// the log-prior, laid out in the row-major θ order.
pub fn theta_mass(
    covs: &[ClassCovariance],
    grams: &GramSet,
    hyper: &HyperState,
    prior: &PriorConfig,
) -> DMatrix<f64> {
    let q = grams.q();
    let m = covs.len();
    let blocks = metric_theta(covs, grams);
    let hess = prior_neg_hessian_theta(hyper, prior);
    let mut mass = DMatrix::zeros(m * q, m * q);
    for (c, b) in blocks.iter().enumerate() {
        mass.view_mut((c * q, c * q), (q, q)).copy_from(b);
        for s in 0..q {
            mass[(c * q + s, c * q + s)] += hess[(c, s)];
        }
    }
    mass
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::class_covariances;
    use crate::linalg::JitterPolicy;
    use crate::model::softmax_probs;
    use crate::rng;
    use rand::SeedableRng;

    #[test]
    fn one_subject_two_classes_by_hand() {
        let eye = DMatrix::<f64>::identity(1, 1);
        let probs = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let g = LatentMetric::new(&[eye.clone(), eye], &probs).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.25, -0.25, -0.25, 1.25]);
        assert!((g.matrix() - expected).amax() < 1e-15);
    }

    #[test]
    fn uniform_homogeneous_metric_equals_fisher_at_zero() {
        let mut r = rng::SimRng::seed_from_u64(2);
        let (n, m) = (4, 3);
        let x = DMatrix::from_fn(n, 6, |_, _| rng::standard_normal(&mut r));
        let grams = GramSet::from_matrices(vec!["a".into()], vec![&x * x.transpose()]).unwrap();
        let covs =
            class_covariances(&DMatrix::zeros(m, 1), &grams, &JitterPolicy::default()).unwrap();
        let at_zero =
            LatentMetric::from_covariances(&covs, &softmax_probs(&DVector::zeros(m * n), m))
                .unwrap();
        let fixed =
            LatentMetric::from_covariances(&covs, &homogeneous_probs(&[1.0 / 3.0; 3], n)).unwrap();
        assert!((at_zero.matrix() - fixed.matrix()).amax() < 1e-12);
    }

    #[test]
    fn subject_blocks_match_dense_inverse() {
        let mut r = rng::SimRng::seed_from_u64(5);
        let (n, m) = (5, 3);
        let x = DMatrix::from_fn(n, 7, |_, _| rng::standard_normal(&mut r));
        let grams = GramSet::from_matrices(vec!["a".into()], vec![&x * x.transpose()]).unwrap();
        let covs = class_covariances(
            &DMatrix::from_fn(m, 1, |c, _| 0.3 * c as f64),
            &grams,
            &JitterPolicy::default(),
        )
        .unwrap();
        let f = rng::standard_normal_vec(&mut r, m * n);
        let g = LatentMetric::from_covariances(&covs, &softmax_probs(&f, m)).unwrap();
        let dense = g.matrix().clone().try_inverse().unwrap();
        for (i, b) in g.subject_inverse_blocks(m).iter().enumerate() {
            for c in 0..m {
                for s in 0..m {
                    let want = dense[(c * n + i, s * n + i)];
                    assert!((b[(c, s)] - want).abs() < 1e-9 * want.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn scalar_metric_for_identity_gram() {
        let grams = GramSet::from_matrices(vec!["a".into()], vec![DMatrix::identity(6, 6)]).unwrap();
        let covs = vec![ClassCovariance {
            k: DMatrix::identity(6, 6),
            factor: CholeskyFactor::from_lower(DMatrix::identity(6, 6)),
            weights: vec![1.0],
            relative_jitter: 0.0,
        }];
        let g = metric_theta(&covs, &grams);
        assert!((g[0][(0, 0)] - 3.0).abs() < 1e-14);
    }
}

#[cfg(test)]
mod derivative_tests {
    use super::*;
    use crate::kernels::class_covariances;
    use crate::linalg::JitterPolicy;
    use crate::model::softmax_probs;
    use crate::rng;
    use rand::SeedableRng;

    #[test]
    fn fisher_derivatives_match_finite_differences() {
        let mut r = rng::SimRng::seed_from_u64(11);
        let (n, m) = (4, 3);
        let x = DMatrix::from_fn(n, 6, |_, _| rng::standard_normal(&mut r));
        let grams = GramSet::from_matrices(vec!["a".into()], vec![&x * x.transpose()]).unwrap();
        let covs =
            class_covariances(&DMatrix::zeros(m, 1), &grams, &JitterPolicy::default()).unwrap();
        let f = rng::standard_normal_vec(&mut r, m * n);
        let u = rng::standard_normal_vec(&mut r, m * n);
        let metric = |f: &DVector<f64>| LatentMetric::from_covariances(&covs, &softmax_probs(f, m)).unwrap();
        let g0 = metric(&f);
        let probs = softmax_probs(&f, m);
        let quad = fisher_quad_gradient(&u, &probs);
        let logdet = fisher_log_det_gradient(&g0.subject_inverse_blocks(m), &probs);
        let h = 1e-5;
        for k in 0..m * n {
            let mut fp = f.clone();
            fp[k] += h;
            let mut fm = f.clone();
            fm[k] -= h;
            let (gp, gm) = (metric(&fp), metric(&fm));
            let dq = (u.dot(&gp.apply(&u)) - u.dot(&gm.apply(&u))) / (2.0 * h);
            let dl = 0.5 * (gp.log_det() - gm.log_det()) / (2.0 * h);
            assert!((dq - quad[k]).abs() < 1e-6, "quad {k}: {dq} vs {}", quad[k]);
            assert!((dl - logdet[k]).abs() < 1e-6, "logdet {k}: {dl} vs {}", logdet[k]);
        }
    }
}
