//! Joint-distribution test of a sampler: draws of (weights, latents, labels)
//! from the prior-then-likelihood simulator must match those from a chain
//! that alternates the sampler's transition with fresh labels.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ess;
use crate::data::{draw_labels, LabelSet};
use crate::error::Result;
use crate::kernels::GramSet;
use crate::model::{color, HyperState, ModelContext, PriorConfig};
use crate::rng::{self, standard_normal_vec};
use crate::samplers::{BlockStats, Chain, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GewekeConfig {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub prior: PriorConfig,
    pub sampler: SamplerConfig,
    /// Draws on each side.
    pub n_outer: usize,
    /// Transition scans between label regenerations.
    pub n_inner: usize,
    /// With the likelihood off both simulators target the prior.
    pub likelihood: bool,
    pub seed: u64,
}

impl GewekeConfig {
    pub fn new(m: usize, sampler: SamplerConfig, n_outer: usize, seed: u64) -> Self {
        Self {
            n: 8,
            m,
            q: 2,
            prior: PriorConfig::default(),
            sampler,
            n_outer,
            n_inner: 1,
            likelihood: true,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GewekeStatistic {
    pub name: String,
    pub marginal_mean: f64,
    pub successive_mean: f64,
    /// ESS of the successive-conditional series.
    pub successive_ess: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GewekeReport {
    pub statistics: Vec<GewekeStatistic>,
    /// Acceptance counters of the successive-conditional chain.
    pub latent: BlockStats,
    pub hyper: BlockStats,
}

impl GewekeReport {
    pub fn within(&self, bound: f64) -> usize {
        self.statistics.iter().filter(|s| s.z.abs() < bound).count()
    }

    pub fn fraction_within(&self, bound: f64) -> f64 {
        self.within(bound) as f64 / self.statistics.len() as f64
    }

    pub fn max_abs_z(&self) -> f64 {
        self.statistics.iter().map(|s| s.z.abs()).fold(0.0, f64::max)
    }
}

/// Random full-rank Grams with unit-scale diagonals.
fn random_grams<R: Rng + ?Sized>(n: usize, q: usize, rng: &mut R) -> GramSet {
    let d = n + 2;
    let grams = (0..q)
        .map(|_| {
            let x = DMatrix::from_fn(n, d, |_, _| rng::standard_normal(rng)) / (d as f64).sqrt();
            let g = &x * x.transpose();
            (&g + g.transpose()) * 0.5
        })
        .collect();
    let ids = (0..q).map(|s| format!("g{s}")).collect();
    GramSet::from_matrices(ids, grams).expect("square symmetric by construction")
}

fn statistic_names(m: usize, q: usize, dirichlet: bool) -> Vec<String> {
    let mut names = Vec::new();
    for c in 0..m {
        for s in 0..q {
            names.push(format!("theta_{c}_{s}"));
        }
    }
    if dirichlet {
        names.push("alpha".into());
    }
    names.push("f_mean".into());
    names.push("f_var".into());
    for c in 0..m {
        names.push(format!("label_freq_{c}"));
    }
    names
}

fn statistics(hyper: &HyperState, f: &DVector<f64>, labels: &[usize], m: usize) -> Vec<f64> {
    let mut out: Vec<f64> = hyper.flat_theta().iter().copied().collect();
    if let Some(a) = hyper.alpha {
        out.push(a);
    }
    let mean = f.mean();
    out.push(mean);
    out.push(f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64);
    for c in 0..m {
        out.push(labels.iter().filter(|&&l| l == c).count() as f64 / labels.len() as f64);
    }
    out
}

fn moments(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Runs both simulators and returns a z-score for the first and second moment
/// of every statistic: each weight log-coordinate (and the concentration under
/// the Dirichlet prior), the mean and variance of `f`, and each class's label
/// frequency. The successive-conditional variance is corrected by its ESS.
pub fn geweke_test(config: &GewekeConfig) -> Result<GewekeReport> {
    let (n, m, q) = (config.n, config.m, config.q);
    config.prior.validate()?;
    config.sampler.validate()?;
    let mut setup_rng = rng::stream(config.seed, "geweke-grams", 0);
    let grams = Arc::new(random_grams(n, q, &mut setup_rng));
    let mut ctx = ModelContext::new(
        grams,
        &LabelSet::from_indices(vec![0; n], m)?,
        config.prior,
    )?;
    ctx.likelihood = config.likelihood;

    let joint_draw = |rng: &mut rng::SimRng| -> Result<(HyperState, DVector<f64>, Vec<usize>)> {
        let hyper = ctx.prior.sample(m, q, rng);
        let covs = ctx.covariances(&hyper)?;
        let f = color(&standard_normal_vec(rng, m * n), &covs);
        let y = draw_labels(&f, m, rng);
        Ok((hyper, f, y))
    };

    let mut marginal_rng = rng::stream(config.seed, "geweke-marginal", 0);
    let mut marginal = Vec::with_capacity(config.n_outer);
    for _ in 0..config.n_outer {
        let (h, f, y) = joint_draw(&mut marginal_rng)?;
        marginal.push(statistics(&h, &f, &y, m));
    }

    let mut rng = rng::stream(config.seed, "geweke-successive", 0);
    let (h0, f0, mut y) = joint_draw(&mut rng)?;
    let mut chain_ctx = ctx.clone();
    chain_ctx.set_labels(&y);
    let mut chain = Chain::new(chain_ctx, config.sampler.clone(), h0, f0)?;
    let mut successive = Vec::with_capacity(config.n_outer);
    for _ in 0..config.n_outer {
        for _ in 0..config.n_inner {
            chain.scan(&mut rng)?;
        }
        y = draw_labels(&chain.state.latent.f, m, &mut rng);
        chain.set_labels(&y);
        successive.push(statistics(&chain.state.hyper, &chain.state.latent.f, &y, m));
    }

    let names = statistic_names(m, q, config.prior.is_dirichlet());
    let mut out = Vec::with_capacity(2 * names.len());
    for (k, name) in names.iter().enumerate() {
        for power in [1, 2] {
            let a: Vec<f64> = marginal.iter().map(|s| s[k].powi(power)).collect();
            let b: Vec<f64> = successive.iter().map(|s| s[k].powi(power)).collect();
            let (ma, va) = moments(&a);
            let (mb, vb) = moments(&b);
            let eb = ess(&b)?;
            let se = (va / a.len() as f64 + vb / eb).sqrt();
            let z = if se > 0.0 {
                (ma - mb) / se
            } else if ma == mb {
                0.0
            } else {
                f64::INFINITY
            };
            out.push(GewekeStatistic {
                name: if power == 1 {
                    name.clone()
                } else {
                    format!("{name}^2")
                },
                marginal_mean: ma,
                successive_mean: mb,
                successive_ess: eb,
                z,
            });
        }
    }
    Ok(GewekeReport {
        statistics: out,
        latent: chain.latent_stats,
        hyper: chain.hyper_stats,
    })
}
