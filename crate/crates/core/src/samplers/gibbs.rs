use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hmc::{hmc_update, Mass, Outcome, Target};
use super::mh::{mh_dirichlet_update, mh_update};
use super::rmhmc::{rmhmc_update_position_metric, MetricPoint, RiemannTarget};
use super::trace::{ChainTrace, TraceMeta};
use super::{Augmentation, Fault, HyperSampler, LatentSampler, SamplerConfig};
use crate::error::{Error, Result};
use crate::kernels::{class_covariance, ClassCovariance};
use crate::linalg::CholeskyFactor;
use crate::model::{
    alpha_log_prior, color, dirichlet_log_density, fisher_log_det_gradient,
    fisher_quad_gradient, gp_grad_theta, gp_log_density, grad_f, grad_theta,
    homogeneous_probs, log_joint, log_likelihood, prior_grad_theta, prior_log_density,
    softmax_probs, theta_mass, HyperState, LatentMetric, LatentState, ModelContext,
};
use crate::rng::{self, standard_normal_vec};

/// Fisher-scoring steps used to place the weight-metric anchor.
const ANCHOR_STEPS: usize = 3;

/// `log p(y|f) + log p(f|θ)` as a function of `f` at fixed weights.
pub struct LatentTarget<'a> {
    pub ctx: &'a ModelContext,
    pub covs: &'a [ClassCovariance],
}

impl LatentTarget<'_> {
    fn log_density(&self, f: &DVector<f64>) -> f64 {
        let lik = if self.ctx.likelihood {
            log_likelihood(self.ctx.y(), f)
        } else {
            0.0
        };
        lik + gp_log_density(f, self.covs)
    }
}

impl Target for LatentTarget<'_> {
    fn dim(&self) -> usize {
        self.ctx.m() * self.ctx.n()
    }

    fn evaluate(&mut self, f: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        Ok((self.log_density(f), grad_f(self.ctx, f, self.covs)))
    }
}

/// The latent target with the metric `K⁻¹ + W(π(f))`.
struct FisherLatentTarget<'a> {
    inner: LatentTarget<'a>,
    precisions: &'a [DMatrix<f64>],
}

impl RiemannTarget for FisherLatentTarget<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn point(&mut self, f: &DVector<f64>) -> Result<MetricPoint> {
        let m = self.inner.ctx.m();
        let probs = softmax_probs(f, m);
        let metric = LatentMetric::new(self.precisions, &probs)?;
        let blocks = metric.subject_inverse_blocks(m);
        Ok(MetricPoint {
            log_density: self.inner.log_density(f),
            grad: grad_f(self.inner.ctx, f, self.inner.covs),
            log_det_grad: fisher_log_det_gradient(&blocks, &probs),
            metric: metric.into_factor(),
        })
    }

    fn metric(&mut self, f: &DVector<f64>) -> Result<CholeskyFactor> {
        let probs = softmax_probs(f, self.inner.ctx.m());
        Ok(LatentMetric::new(self.precisions, &probs)?.into_factor())
    }

    fn quad_grad(&self, f: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        fisher_quad_gradient(u, &softmax_probs(f, self.inner.ctx.m()))
    }
}

/// `log p(f|θ) + log p(θ)` over row-major flattened θ.
struct ThetaTarget<'a> {
    ctx: &'a ModelContext,
    f: &'a DVector<f64>,
    with_prior: bool,
}

impl ThetaTarget<'_> {
    fn hyper(&self, x: &DVector<f64>) -> HyperState {
        let mut h = HyperState::zeros(self.ctx.m(), self.ctx.q());
        h.set_flat_theta(x);
        h
    }
}

impl Target for ThetaTarget<'_> {
    fn dim(&self) -> usize {
        self.ctx.m() * self.ctx.q()
    }

    fn evaluate(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let hyper = self.hyper(x);
        let covs = self.ctx.covariances(&hyper)?;
        let mut lp = gp_log_density(self.f, &covs);
        let mut g = gp_grad_theta(self.f, &covs, &self.ctx.grams);
        if self.with_prior {
            lp += prior_log_density(&hyper, &self.ctx.prior);
            g += prior_grad_theta(&hyper, &self.ctx.prior);
        }
        let flat = HyperState {
            theta: g,
            alpha: None,
        }
        .flat_theta();
        Ok((lp, flat))
    }
}

/// Acceptance bookkeeping for one update block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub proposed: u64,
    pub accepted: u64,
    pub divergent: u64,
    pub nonconverged: u64,
}

impl BlockStats {
    pub fn record(&mut self, o: &Outcome) {
        self.proposed += 1;
        self.accepted += o.accepted as u64;
        self.divergent += o.divergent as u64;
        self.nonconverged += o.nonconverged as u64;
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn merge(&mut self, other: &BlockStats) {
        self.proposed += other.proposed;
        self.accepted += other.accepted;
        self.divergent += other.divergent;
        self.nonconverged += other.nonconverged;
    }
}

/// Which blocks accepted during one scan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanFlags {
    pub latent: bool,
    pub hyper: bool,
    pub alpha: bool,
}

#[derive(Debug, Clone)]
pub struct ChainState {
    pub hyper: HyperState,
    pub latent: LatentState,
    pub covs: Vec<ClassCovariance>,
}

/// One Markov chain: model, sampler settings, current state and counters.
pub struct Chain {
    ctx: ModelContext,
    config: SamplerConfig,
    latent_sampler: LatentSampler,
    hyper_sampler: HyperSampler,
    augmentation: Augmentation,
    pub state: ChainState,
    pub latent_stats: BlockStats,
    pub hyper_stats: BlockStats,
    pub alpha_stats: BlockStats,
    pub max_jitter: f64,
    pub jitter_escalations: u64,
    precisions: Option<Vec<DMatrix<f64>>>,
    fixed_mass: Option<Mass>,
}

impl Chain {
    pub fn new(
        ctx: ModelContext,
        config: SamplerConfig,
        hyper: HyperState,
        f: DVector<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let (latent_sampler, hyper_sampler, augmentation) = config.parts();
        if augmentation == Augmentation::Ancillary
            && matches!(hyper_sampler, HyperSampler::Hmc | HyperSampler::MetricHmc)
            && !ctx.prior.is_dirichlet()
        {
            return Err(Error::InvalidArgument(
                "gradient-based weight updates are only available under sufficient augmentation"
                    .into(),
            ));
        }
        if ctx.prior.is_dirichlet() != hyper.alpha.is_some() {
            return Err(Error::InvalidArgument(
                "concentration must be present exactly under the Dirichlet prior".into(),
            ));
        }
        let covs = ctx.covariances(&hyper)?;
        let latent = LatentState::from_f(f, &covs);
        let mut chain = Self {
            ctx,
            config,
            latent_sampler,
            hyper_sampler,
            augmentation,
            state: ChainState {
                hyper,
                latent,
                covs,
            },
            latent_stats: BlockStats::default(),
            hyper_stats: BlockStats::default(),
            alpha_stats: BlockStats::default(),
            max_jitter: 0.0,
            jitter_escalations: 0,
            precisions: None,
            fixed_mass: None,
        };
        chain.note_jitter();
        Ok(chain)
    }

    /// Weights from the prior (zero when held fixed) and `f ~ N(0, K(θ))`.
    pub fn from_prior<R: Rng + ?Sized>(
        ctx: ModelContext,
        config: SamplerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (m, q) = (ctx.m(), ctx.q());
        let hyper = if config.parts().1 == HyperSampler::Fixed {
            let mut h = HyperState::zeros(m, q);
            if ctx.prior.is_dirichlet() {
                h.alpha = Some(1.0);
            }
            h
        } else {
            ctx.prior.sample(m, q, rng)
        };
        let covs = ctx.covariances(&hyper)?;
        let f = color(&standard_normal_vec(rng, m * ctx.n()), &covs);
        Self::new(ctx, config, hyper, f)
    }

    pub fn ctx(&self) -> &ModelContext {
        &self.ctx
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Replaces the class labels (the data) while keeping the state.
    pub fn set_labels(&mut self, index: &[usize]) {
        self.ctx.set_labels(index);
        self.fixed_mass = None;
    }

    pub fn log_joint(&self) -> f64 {
        log_joint(
            &self.ctx,
            &self.state.latent.f,
            &self.state.hyper,
            &self.state.covs,
        )
    }

    fn note_jitter(&mut self) {
        for cov in &self.state.covs {
            self.max_jitter = self.max_jitter.max(cov.jitter_used());
            self.jitter_escalations += cov.factor.escalations() as u64;
        }
    }

    fn set_covariances(&mut self, covs: Vec<ClassCovariance>) {
        self.state.covs = covs;
        self.precisions = None;
        self.fixed_mass = None;
        self.note_jitter();
    }

    fn precisions(&mut self) -> &[DMatrix<f64>] {
        if self.precisions.is_none() {
            self.precisions = Some(self.state.covs.iter().map(|c| c.factor.inverse()).collect());
        }
        self.precisions.as_deref().expect("just filled")
    }

    /// One full Gibbs sweep.
    pub fn scan<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<ScanFlags> {
        let latent = self.update_latent(rng)?;
        let mut flags = ScanFlags {
            latent,
            ..Default::default()
        };
        if self.hyper_sampler != HyperSampler::Fixed {
            if self.ctx.prior.is_dirichlet() {
                flags.hyper = self.update_simplex_weights(rng)?;
                flags.alpha = self.update_alpha(rng);
            } else {
                flags.hyper = self.update_theta(rng)?;
            }
        }
        Ok(flags)
    }

    fn update_latent<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<bool> {
        let eps = self.config.step_size_f;
        let steps = self.config.leapfrog_steps;
        let f = self.state.latent.f.clone();
        let (f_new, outcome) = match self.latent_sampler {
            LatentSampler::Hmc => {
                let mut target = LatentTarget {
                    ctx: &self.ctx,
                    covs: &self.state.covs,
                };
                hmc_update(&f, None, &mut target, &Mass::Identity, eps, steps, rng)?
            }
            LatentSampler::FixedMetric => {
                if self.fixed_mass.is_none() {
                    let freqs: Vec<f64> = self
                        .ctx
                        .y()
                        .column_iter()
                        .map(|c| c.sum() / self.ctx.n() as f64)
                        .collect();
                    let probs = homogeneous_probs(&freqs, self.ctx.n());
                    let metric = LatentMetric::new(self.precisions(), &probs)?;
                    self.fixed_mass = Some(Mass::Dense(metric.into_factor()));
                }
                let mass = self.fixed_mass.as_ref().expect("just filled");
                let mut target = LatentTarget {
                    ctx: &self.ctx,
                    covs: &self.state.covs,
                };
                hmc_update(&f, None, &mut target, mass, eps, steps, rng)?
            }
            LatentSampler::PositionMetric => {
                self.precisions();
                let settings = self.config.implicit();
                let mut target = FisherLatentTarget {
                    inner: LatentTarget {
                        ctx: &self.ctx,
                        covs: &self.state.covs,
                    },
                    precisions: self.precisions.as_deref().expect("filled above"),
                };
                rmhmc_update_position_metric(&f, None, &mut target, &settings, rng)?
            }
        };
        self.latent_stats.record(&outcome);
        if outcome.accepted {
            self.state.latent = LatentState::from_f(f_new, &self.state.covs);
        }
        Ok(outcome.accepted)
    }

    fn with_prior(&self) -> bool {
        self.config.fault != Some(Fault::DropHyperPrior)
    }

    fn update_theta<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<bool> {
        let x = self.state.hyper.flat_theta();
        let with_prior = self.with_prior();
        let (x_new, outcome) = match (self.hyper_sampler, self.augmentation) {
            (HyperSampler::Hmc, _) | (HyperSampler::MetricHmc, _) => {
                let mass = if self.hyper_sampler == HyperSampler::MetricHmc {
                    anchor_mass(&self.ctx, &self.state.latent.f)?
                } else {
                    Mass::Identity
                };
                let mut target = ThetaTarget {
                    ctx: &self.ctx,
                    f: &self.state.latent.f,
                    with_prior,
                };
                hmc_update(
                    &x,
                    None,
                    &mut target,
                    &mass,
                    self.config.step_size_theta,
                    self.config.leapfrog_steps,
                    rng,
                )?
            }
            (HyperSampler::Mh, aug) => {
                let ctx = &self.ctx;
                let latent = &self.state.latent;
                let (m, q) = (ctx.m(), ctx.q());
                let density = |x: &DVector<f64>| -> Result<f64> {
                    let mut h = HyperState::zeros(m, q);
                    h.set_flat_theta(x);
                    let covs = ctx.covariances(&h)?;
                    let prior = if with_prior {
                        prior_log_density(&h, &ctx.prior)
                    } else {
                        0.0
                    };
                    Ok(prior
                        + match aug {
                            Augmentation::Sufficient => gp_log_density(&latent.f, &covs),
                            Augmentation::Ancillary if ctx.likelihood => {
                                log_likelihood(ctx.y(), &color(&latent.nu, &covs))
                            }
                            Augmentation::Ancillary => 0.0,
                        })
                };
                let current = density(&x)?;
                let (xn, _, o) = mh_update(&x, current, self.config.step_size_theta, density, rng);
                (xn, o)
            }
            (HyperSampler::Fixed, _) => return Ok(false),
        };
        self.hyper_stats.record(&outcome);
        if outcome.accepted {
            self.state.hyper.set_flat_theta(&x_new);
            let covs = self.ctx.covariances(&self.state.hyper)?;
            self.resync_latent(&covs);
            self.set_covariances(covs);
        }
        Ok(outcome.accepted)
    }

    /// After the factors change: SA keeps `f` and re-whitens, AA keeps `ν`.
    fn resync_latent(&mut self, covs: &[ClassCovariance]) {
        self.state.latent = match self.augmentation {
            Augmentation::Sufficient => LatentState::from_f(self.state.latent.f.clone(), covs),
            Augmentation::Ancillary => LatentState::from_nu(self.state.latent.nu.clone(), covs),
        };
    }

    fn update_simplex_weights<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<bool> {
        let alpha = self.state.hyper.alpha.expect("Dirichlet state carries alpha");
        let with_prior = self.with_prior();
        let (m, q, n) = (self.ctx.m(), self.ctx.q(), self.ctx.n());
        let mut any = false;
        for c in 0..m {
            let ctx = &self.ctx;
            let state = &self.state;
            let aug = self.augmentation;
            let class_density = |lw: &[f64]| -> Result<(f64, ClassCovariance)> {
                let cov = class_covariance(lw, &ctx.grams, &ctx.jitter)?;
                let prior = if with_prior {
                    dirichlet_log_density(lw, alpha)
                } else {
                    0.0
                };
                let data = match aug {
                    Augmentation::Sufficient => {
                        let fc = state.latent.f.rows(c * n, n).clone_owned();
                        gp_log_density(&fc, std::slice::from_ref(&cov))
                    }
                    Augmentation::Ancillary if ctx.likelihood => {
                        let nu_c = state.latent.nu.rows(c * n, n).clone_owned();
                        let mut f = state.latent.f.clone();
                        f.rows_mut(c * n, n).copy_from(&cov.factor.mul_lower(&nu_c));
                        log_likelihood(ctx.y(), &f)
                    }
                    Augmentation::Ancillary => 0.0,
                };
                Ok((prior + data, cov))
            };
            let lw: Vec<f64> = state.hyper.theta.row(c).iter().copied().collect();
            let current = class_density(&lw)?.0;
            let (lw_new, _, outcome) = mh_dirichlet_update(
                &lw,
                current,
                &self.config.dirichlet,
                |l| class_density(l).map(|(lp, _)| lp),
                rng,
            );
            self.hyper_stats.record(&outcome);
            if outcome.accepted {
                any = true;
                for s in 0..q {
                    self.state.hyper.theta[(c, s)] = lw_new[s];
                }
                let mut covs = self.state.covs.clone();
                covs[c] = class_covariance(&lw_new, &self.ctx.grams, &self.ctx.jitter)?;
                self.resync_latent(&covs);
                self.set_covariances(covs);
            }
        }
        Ok(any)
    }

    fn update_alpha<R: Rng + ?Sized>(&mut self, rng: &mut R) -> bool {
        let crate::model::PriorConfig::Dirichlet { alpha_rate } = self.ctx.prior else {
            return false;
        };
        let with_prior = self.with_prior();
        let theta = &self.state.hyper.theta;
        let density = |x: &DVector<f64>| -> Result<f64> {
            let alpha = x[0].exp();
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::InvalidArgument("concentration out of range".into()));
            }
            let simplex: f64 = theta
                .row_iter()
                .map(|r| {
                    let lw: Vec<f64> = r.iter().copied().collect();
                    dirichlet_log_density(&lw, alpha)
                })
                .sum();
            Ok(simplex
                + if with_prior {
                    alpha_log_prior(alpha, alpha_rate)
                } else {
                    0.0
                })
        };
        let x = DVector::from_element(1, self.state.hyper.alpha.expect("alpha").ln());
        let current = match density(&x) {
            Ok(v) => v,
            Err(_) => return false,
        };
        let (xn, _, outcome) = mh_update(&x, current, self.config.dirichlet.alpha_step, density, rng);
        self.alpha_stats.record(&outcome);
        if outcome.accepted {
            self.state.hyper.alpha = Some(xn[0].exp());
        }
        outcome.accepted
    }
}

/// Mass for the weight block: the weight metric plus prior curvature,
/// evaluated at weights obtained from `f` alone by a few clamped
/// Fisher-scoring steps started at zero. Because the anchor depends only on
/// `f`, the mass is constant for the whole `θ | f` update and the move stays
/// an exact HMC kernel.
fn anchor_mass(ctx: &ModelContext, f: &DVector<f64>) -> Result<Mass> {
    let (m, q) = (ctx.m(), ctx.q());
    let mut hyper = HyperState::zeros(m, q);
    for _ in 0..ANCHOR_STEPS {
        let covs = ctx.covariances(&hyper)?;
        let g = HyperState {
            theta: grad_theta(ctx, f, &hyper, &covs),
            alpha: None,
        }
        .flat_theta();
        let mass = theta_mass(&covs, &ctx.grams, &hyper, &ctx.prior);
        let step = CholeskyFactor::exact(&mass)?.solve(&g).map(|v| v.clamp(-1.0, 1.0));
        let next = hyper.flat_theta() + step;
        hyper.set_flat_theta(&next);
    }
    let covs = ctx.covariances(&hyper)?;
    Mass::dense(&theta_mass(&covs, &ctx.grams, &hyper, &ctx.prior))
}

/// Runs `config.n_chains` independent chains in parallel, each initialized
/// from the prior with its own random stream.
///
/// A chain that fails keeps the samples collected so far and records the
/// reason in its metadata; see [`super::first_abort`].
pub fn run_chains(ctx: &ModelContext, config: &SamplerConfig) -> Result<Vec<ChainTrace>> {
    config.validate()?;
    Ok((0..config.n_chains)
        .into_par_iter()
        .map(|c| run_one(ctx, config, c))
        .collect())
}

fn run_one(ctx: &ModelContext, config: &SamplerConfig, index: usize) -> ChainTrace {
    let seed = rng::derive_seed(config.seed, "chain", index as u64);
    let mut rng = rng::seeded(seed);
    let mut trace = ChainTrace::new(TraceMeta::new(ctx, config, index, seed));
    let mut chain = match Chain::from_prior(ctx.clone(), config.clone(), &mut rng) {
        Ok(c) => c,
        Err(e) => {
            trace.meta.aborted = Some(e.to_string());
            return trace;
        }
    };
    for t in 0..config.n_iterations {
        let flags = match chain.scan(&mut rng) {
            Ok(flags) => flags,
            Err(e) => {
                trace.meta.aborted = Some(format!("iteration {t}: {e}"));
                break;
            }
        };
        let lj = chain.log_joint();
        trace.log_joint_all.push(lj);
        if t >= config.burn_in && (t - config.burn_in + 1).is_multiple_of(config.thin) {
            trace.push(t, flags, lj, &chain.state, config.store_f);
        }
    }
    trace.meta.latent = chain.latent_stats;
    trace.meta.hyper = chain.hyper_stats;
    trace.meta.alpha = chain.alpha_stats;
    trace.meta.max_jitter = chain.max_jitter;
    trace.meta.jitter_escalations = chain.jitter_escalations;
    trace
}

/// Pilot tuning of the latent step size: starting from `config.step_size_f`,
/// halves it until a short pilot chain accepts at least `min_rate` of its
/// latent proposals, giving up after `max_halvings`. The hyper step is left
/// alone. Pilot draws are discarded.
pub fn pilot_step_size(
    ctx: &ModelContext,
    config: &SamplerConfig,
    pilot_scans: usize,
    min_rate: f64,
    max_halvings: usize,
) -> Result<SamplerConfig> {
    let mut tuned = config.clone();
    for round in 0..=max_halvings {
        let mut rng = rng::stream(config.seed, "pilot", round as u64);
        let mut chain = Chain::from_prior(ctx.clone(), tuned.clone(), &mut rng)?;
        for _ in 0..pilot_scans {
            chain.scan(&mut rng)?;
        }
        if chain.latent_stats.rate() >= min_rate || round == max_halvings {
            break;
        }
        tuned.step_size_f *= 0.5;
    }
    Ok(tuned)
}
