//! Multinomial logit likelihood with independent per-class GP priors over
//! weighted sums of Gram matrices.
//!
//! Latent vectors are stored class-major: `f[c * n + i]` is class `c` of
//! subject `i`. Log-weights `θ` form an `m × q` matrix; flattened views use
//! row-major order `θ[c * q + s]`.

mod metric;

pub use metric::{
    fisher_log_det_gradient, fisher_quad_gradient, homogeneous_probs, metric_theta,
    theta_mass, LatentMetric,
};

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::LabelSet;
use crate::error::{Error, Result};
use crate::kernels::{class_covariances, ClassCovariance, GramSet};
use crate::linalg::JitterPolicy;

/// Prior over the per-class modality weights `exp(θ_cs)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    /// Independent `Gamma(shape, rate)` on every weight.
    Gamma { shape: f64, rate: f64 },
    /// Symmetric Dirichlet per class with a shared concentration `α ~ Exp(alpha_rate)`.
    Dirichlet { alpha_rate: f64 },
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig::Gamma {
            shape: 2.0,
            rate: 2.0,
        }
    }
}

impl PriorConfig {
    pub fn dirichlet() -> Self {
        PriorConfig::Dirichlet { alpha_rate: 1.0 }
    }

    pub fn is_dirichlet(&self) -> bool {
        matches!(self, PriorConfig::Dirichlet { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PriorConfig::Gamma { shape, rate } => shape > 0.0 && rate > 0.0,
            PriorConfig::Dirichlet { alpha_rate } => alpha_rate > 0.0,
        };
        if ok && self.params_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "prior parameters must be positive and finite: {self:?}"
            )))
        }
    }

    fn params_finite(&self) -> bool {
        match *self {
            PriorConfig::Gamma { shape, rate } => shape.is_finite() && rate.is_finite(),
            PriorConfig::Dirichlet { alpha_rate } => alpha_rate.is_finite(),
        }
    }

    /// Draws log-weights (and `α`) from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, q: usize, rng: &mut R) -> HyperState {
        match *self {
            PriorConfig::Gamma { shape, rate } => {
                let theta = DMatrix::from_fn(m, q, |_, _| log_gamma_draw(shape, 1.0 / rate, rng));
                HyperState { theta, alpha: None }
            }
            PriorConfig::Dirichlet { alpha_rate } => {
                let alpha = Exp::new(alpha_rate)
                    .expect("validated exponential prior")
                    .sample(rng)
                    .max(1e-300);
                let theta = DMatrix::from_fn(m, q, |_, _| 0.0);
                let mut hyper = HyperState {
                    theta,
                    alpha: Some(alpha),
                };
                for c in 0..m {
                    let logw = sample_log_dirichlet(&vec![alpha; q], rng);
                    for (s, v) in logw.into_iter().enumerate() {
                        hyper.theta[(c, s)] = v;
                    }
                }
                hyper
            }
        }
    }
}

/// `ln G` for `G ~ Gamma(shape, ·)`, staying finite for small shapes.
fn log_gamma_draw<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        let g = Gamma::new(shape, scale).expect("positive shape and scale");
        return g.sample(rng).max(f64::MIN_POSITIVE).ln();
    }
    // G(a) = G(a + 1) · U^(1/a), in logs
    let boosted = Gamma::new(shape + 1.0, scale).expect("positive shape and scale");
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    boosted.sample(rng).ln() + u.ln() / shape
}

/// Log of a Dirichlet draw, normalized in log space.
pub fn sample_log_dirichlet<R: Rng + ?Sized>(conc: &[f64], rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = conc
        .iter()
        .map(|&a| log_gamma_draw(a, 1.0, rng))
        .collect();
    let lse = log_sum_exp(&logs);
    logs.iter().map(|l| l - lse).collect()
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-weights and, under the Dirichlet prior, the concentration.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperState {
    /// `m × q`
    pub theta: DMatrix<f64>,
    pub alpha: Option<f64>,
}

impl HyperState {
    pub fn zeros(m: usize, q: usize) -> Self {
        Self {
            theta: DMatrix::zeros(m, q),
            alpha: None,
        }
    }

    pub fn weights(&self) -> DMatrix<f64> {
        self.theta.map(f64::exp)
    }

    /// Row-major flattening.
    pub fn flat_theta(&self) -> DVector<f64> {
        let (m, q) = self.theta.shape();
        DVector::from_fn(m * q, |k, _| self.theta[(k / q, k % q)])
    }

    pub fn set_flat_theta(&mut self, flat: &DVector<f64>) {
        let q = self.theta.ncols();
        for (k, v) in flat.iter().enumerate() {
            self.theta[(k / q, k % q)] = *v;
        }
    }
}

/// Latent values together with their whitened counterpart `ν_c = L_c⁻¹ f_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub f: DVector<f64>,
    pub nu: DVector<f64>,
}

impl LatentState {
    pub fn from_f(f: DVector<f64>, covs: &[ClassCovariance]) -> Self {
        let nu = whiten(&f, covs);
        Self { f, nu }
    }

    pub fn from_nu(nu: DVector<f64>, covs: &[ClassCovariance]) -> Self {
        let f = color(&nu, covs);
        Self { f, nu }
    }
}

/// `ν_c = L_c⁻¹ f_c` per class.
pub fn whiten(f: &DVector<f64>, covs: &[ClassCovariance]) -> DVector<f64> {
    let n = covs[0].factor.dim();
    let mut nu = DVector::zeros(f.len());
    for (c, cov) in covs.iter().enumerate() {
        let block = f.rows(c * n, n).clone_owned();
        nu.rows_mut(c * n, n).copy_from(&cov.factor.solve_lower(&block));
    }
    nu
}

/// `f_c = L_c ν_c` per class.
pub fn color(nu: &DVector<f64>, covs: &[ClassCovariance]) -> DVector<f64> {
    let n = covs[0].factor.dim();
    let mut f = DVector::zeros(nu.len());
    for (c, cov) in covs.iter().enumerate() {
        let block = nu.rows(c * n, n).clone_owned();
        f.rows_mut(c * n, n).copy_from(&cov.factor.mul_lower(&block));
    }
    f
}

/// Everything the density needs besides the sampled variables.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub grams: Arc<GramSet>,
    y: DMatrix<f64>,
    pub prior: PriorConfig,
    pub jitter: JitterPolicy,
    /// When false the label term is dropped and the target is the prior.
    pub likelihood: bool,
}

impl ModelContext {
    pub fn new(grams: Arc<GramSet>, labels: &LabelSet, prior: PriorConfig) -> Result<Self> {
        if labels.n_subjects() != grams.n() {
            return Err(Error::Dimension(format!(
                "{} labels for {} subjects",
                labels.n_subjects(),
                grams.n()
            )));
        }
        prior.validate()?;
        Ok(Self {
            grams,
            y: labels.onehot(),
            prior,
            jitter: JitterPolicy::default(),
            likelihood: true,
        })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn m(&self) -> usize {
        self.y.ncols()
    }

    pub fn q(&self) -> usize {
        self.grams.q()
    }

    /// `n × m` one-hot labels.
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// Labels flattened class-major to match `f`.
    pub fn y_flat(&self) -> DVector<f64> {
        let (n, m) = self.y.shape();
        DVector::from_fn(m * n, |k, _| self.y[(k % n, k / n)])
    }

    pub fn set_labels(&mut self, index: &[usize]) {
        self.y.fill(0.0);
        for (i, &c) in index.iter().enumerate() {
            self.y[(i, c)] = 1.0;
        }
    }

    pub fn covariances(&self, hyper: &HyperState) -> Result<Vec<ClassCovariance>> {
        class_covariances(&hyper.theta, &self.grams, &self.jitter)
    }
}

/// `n × m` class probabilities with per-subject max subtraction.
pub fn softmax_probs(f: &DVector<f64>, m: usize) -> DMatrix<f64> {
    let n = f.len() / m;
    let mut pi = DMatrix::zeros(n, m);
    for i in 0..n {
        let max = (0..m).map(|c| f[c * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..m {
            let e = (f[c * n + i] - max).exp();
            pi[(i, c)] = e;
            total += e;
        }
        for c in 0..m {
            pi[(i, c)] /= total;
        }
    }
    pi
}

/// Class probabilities flattened class-major like `f`.
pub(crate) fn flat_probs(pi: &DMatrix<f64>) -> DVector<f64> {
    let (n, m) = pi.shape();
    DVector::from_fn(m * n, |k, _| pi[(k % n, k / n)])
}

/// `Σ_i log π_{i, y_i}`
pub fn log_likelihood(y: &DMatrix<f64>, f: &DVector<f64>) -> f64 {
    let (n, m) = y.shape();
    let mut total = 0.0;
    let mut row = vec![0.0; m];
    for i in 0..n {
        for (c, r) in row.iter_mut().enumerate() {
            *r = f[c * n + i];
        }
        let lse = log_sum_exp(&row);
        for c in 0..m {
            if y[(i, c)] != 0.0 {
                total += y[(i, c)] * (row[c] - lse);
            }
        }
    }
    total
}

/// `Σ_c log N(f_c | 0, K_c)`
pub fn gp_log_density(f: &DVector<f64>, covs: &[ClassCovariance]) -> f64 {
    let n = covs[0].factor.dim();
    let mut total = -0.5 * (covs.len() * n) as f64 * (2.0 * PI).ln();
    for (c, cov) in covs.iter().enumerate() {
        let z = cov.factor.solve_lower(&f.rows(c * n, n).clone_owned());
        total += -0.5 * z.norm_squared() - 0.5 * cov.factor.log_det();
    }
    total
}

/// Log-density of a symmetric Dirichlet with respect to the first `q − 1`
/// simplex coordinates.
pub fn dirichlet_log_density(log_weights: &[f64], alpha: f64) -> f64 {
    let q = log_weights.len() as f64;
    ln_gamma(q * alpha) - q * ln_gamma(alpha) + (alpha - 1.0) * log_weights.iter().sum::<f64>()
}

/// Prior on the log-weights, including the change of variables from weights
/// to log-weights under the Gamma prior, and the log-scale Jacobian of `α`
/// under the Dirichlet prior.
pub fn prior_log_density(hyper: &HyperState, prior: &PriorConfig) -> f64 {
    match *prior {
        PriorConfig::Gamma { shape, rate } => {
            let norm = shape * rate.ln() - ln_gamma(shape);
            hyper
                .theta
                .iter()
                .map(|&t| norm + shape * t - rate * t.exp())
                .sum()
        }
        PriorConfig::Dirichlet { alpha_rate } => {
            let alpha = hyper.alpha.expect("Dirichlet state carries alpha");
            let simplex: f64 = hyper
                .theta
                .row_iter()
                .map(|row| {
                    let lw: Vec<f64> = row.iter().copied().collect();
                    dirichlet_log_density(&lw, alpha)
                })
                .sum();
            simplex + alpha_log_prior(alpha, alpha_rate)
        }
    }
}

/// `Exp(rate)` on `α`, expressed on `log α`.
pub fn alpha_log_prior(alpha: f64, rate: f64) -> f64 {
    rate.ln() - rate * alpha + alpha.ln()
}

/// `∂ log p(θ) / ∂θ`, `m × q`. Under the Dirichlet prior this treats θ as
/// unconstrained, differentiating the density formula directly.
pub fn prior_grad_theta(hyper: &HyperState, prior: &PriorConfig) -> DMatrix<f64> {
    match *prior {
        PriorConfig::Gamma { shape, rate } => hyper.theta.map(|t| shape - rate * t.exp()),
        PriorConfig::Dirichlet { .. } => {
            let alpha = hyper.alpha.expect("Dirichlet state carries alpha");
            hyper.theta.map(|_| alpha - 1.0)
        }
    }
}

/// Diagonal of `−∂² log p(θ) / ∂θ²`, `m × q`.
pub fn prior_neg_hessian_theta(hyper: &HyperState, prior: &PriorConfig) -> DMatrix<f64> {
    match *prior {
        PriorConfig::Gamma { rate, .. } => hyper.theta.map(|t| rate * t.exp()),
        PriorConfig::Dirichlet { .. } => hyper.theta.map(|_| 0.0),
    }
}

/// `log p(y|f) + log p(f|θ) + log p(θ)`.
pub fn log_joint(
    ctx: &ModelContext,
    f: &DVector<f64>,
    hyper: &HyperState,
    covs: &[ClassCovariance],
) -> f64 {
    let lik = if ctx.likelihood {
        log_likelihood(ctx.y(), f)
    } else {
        0.0
    };
    lik + gp_log_density(f, covs) + prior_log_density(hyper, &ctx.prior)
}

/// `∂L/∂f = y − π − K⁻¹f`.
pub fn grad_f(ctx: &ModelContext, f: &DVector<f64>, covs: &[ClassCovariance]) -> DVector<f64> {
    let mut g = -precision_times(f, covs);
    if ctx.likelihood {
        g += ctx.y_flat() - flat_probs(&softmax_probs(f, ctx.m()));
    }
    g
}

/// `K⁻¹ f`, blockwise.
pub fn precision_times(f: &DVector<f64>, covs: &[ClassCovariance]) -> DVector<f64> {
    let n = covs[0].factor.dim();
    let mut out = DVector::zeros(f.len());
    for (c, cov) in covs.iter().enumerate() {
        let v = cov.factor.solve(&f.rows(c * n, n).clone_owned());
        out.rows_mut(c * n, n).copy_from(&v);
    }
    out
}

/// Gradient of `log p(f|θ)` in θ.
///
/// The factorized matrix is `K + ρ·mean(diag K)·I` with a fixed relative
/// jitter `ρ`, so each weight scales `C_s + ρ·mean(diag C_s)·I`; both the
/// trace and the quadratic term use that jittered Gram.
pub fn gp_grad_theta(
    f: &DVector<f64>,
    covs: &[ClassCovariance],
    grams: &GramSet,
) -> DMatrix<f64> {
    let n = grams.n();
    let q = grams.q();
    let mut g = DMatrix::zeros(covs.len(), q);
    for (c, cov) in covs.iter().enumerate() {
        let kinv = cov.factor.inverse();
        let tr_kinv = kinv.trace();
        let v = cov.factor.solve(&f.rows(c * n, n).clone_owned());
        let vv = v.norm_squared();
        for j in 0..q {
            let cj = grams.get(j);
            let shift = cov.relative_jitter * grams.mean_diag(j);
            let tr = kinv.dot(cj) + shift * tr_kinv;
            let quad = (cj * &v).dot(&v) + shift * vv;
            g[(c, j)] = 0.5 * cov.weights[j] * (quad - tr);
        }
    }
    g
}

/// `∂L/∂θ`, `m × q`.
pub fn grad_theta(
    ctx: &ModelContext,
    f: &DVector<f64>,
    hyper: &HyperState,
    covs: &[ClassCovariance],
) -> DMatrix<f64> {
    gp_grad_theta(f, covs, &ctx.grams) + prior_grad_theta(hyper, &ctx.prior)
}
