//! Posterior predictive class probabilities for unseen subjects.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{ClassCovariance, CrossGram};
use crate::model::{HyperState, ModelContext};
use crate::rng;
use crate::samplers::ChainTrace;

/// Default number of latent draws per posterior sample.
pub const DEFAULT_N2: usize = 32;

/// Latent predictive moments at one posterior sample: `n_test × m` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPredictive {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
}

/// Mean and variance of `f*` given one `(f, θ)` sample.
///
/// `μ*_c = k_cᵀ K_c⁻¹ f_c` and `σ²*_c = k_c** − k_cᵀ K_c⁻¹ k_c`, where
/// `K_c` is the factorized (jittered) training covariance, `k_c` the
/// weighted cross inner products and `k_c**` the weighted squared norms of
/// the test rows. Classes are a priori independent, so each test subject
/// gets `m` independent scalar Gaussians. Small negative variances from
/// rounding are clamped to zero.
pub fn predictive_conditional(
    f: &DVector<f64>,
    covs: &[ClassCovariance],
    cross: &CrossGram,
) -> Result<LatentPredictive> {
    let m = covs.len();
    let n_test = cross.cross.first().map_or(0, |c| c.nrows());
    let n = covs.first().map_or(0, |c| c.k.nrows());
    if f.len() != m * n {
        return Err(Error::Dimension(format!(
            "latent vector of length {} for {m} classes of {n} subjects",
            f.len()
        )));
    }
    let mut mean = DMatrix::zeros(n_test, m);
    let mut var = DMatrix::zeros(n_test, m);
    for (c, cov) in covs.iter().enumerate() {
        if cov.weights.len() != cross.cross.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} test modalities",
                cov.weights.len(),
                cross.cross.len()
            )));
        }
        let mut k_star = DMatrix::zeros(n_test, n);
        let mut prior_var = vec![0.0; n_test];
        for ((x, norms), &w) in cross.cross.iter().zip(&cross.self_norms).zip(&cov.weights) {
            k_star += x * w;
            for (v, nrm) in prior_var.iter_mut().zip(norms) {
                *v += w * nrm;
            }
        }
        let alpha = cov.factor.solve(&f.rows(c * n, n).clone_owned());
        let mu = &k_star * alpha;
        // L⁻¹ K_·* column by column
        let half = cov.factor.solve_lower_mat(&k_star.transpose());
        for i in 0..n_test {
            mean[(i, c)] = mu[i];
            var[(i, c)] = (prior_var[i] - half.column(i).norm_squared()).max(0.0);
        }
    }
    Ok(LatentPredictive { mean, var })
}

/// Averaged class probabilities for each test subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    /// `n_test × m`; rows sum to one.
    pub probs: DMatrix<f64>,
    /// Monte Carlo standard error of each entry.
    pub se: DMatrix<f64>,
    pub n1: usize,
    pub n2: usize,
}

fn softmax_row(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Per-sample average over `n2` latent draws, plus the within-sample variance.
fn sample_average(
    pred: &LatentPredictive,
    n2: usize,
    rng: &mut rng::SimRng,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n_test, m) = pred.mean.shape();
    let mut avg = DMatrix::zeros(n_test, m);
    let mut sq = DMatrix::zeros(n_test, m);
    let mut draw = vec![0.0; m];
    let mut p = vec![0.0; m];
    for i in 0..n_test {
        for _ in 0..n2 {
            for c in 0..m {
                draw[c] = pred.mean[(i, c)] + pred.var[(i, c)].sqrt() * rng::standard_normal(rng);
            }
            softmax_row(&draw, &mut p);
            for c in 0..m {
                avg[(i, c)] += p[c];
                sq[(i, c)] += p[c] * p[c];
            }
        }
    }
    avg /= n2 as f64;
    let within = if n2 > 1 {
        (sq / n2 as f64 - avg.component_mul(&avg)) * (n2 as f64 / (n2 - 1) as f64)
    } else {
        DMatrix::zeros(n_test, m)
    };
    (avg, within)
}

/// Two-stage Monte Carlo estimate of `p(y* | y)`: for each of the `N1`
/// retained posterior samples, `n2` draws of `f*` from its Gaussian
/// conditional are pushed through the softmax and averaged.
///
/// The standard error is the between-sample standard deviation of the
/// per-sample averages over `√N1`; with a single sample it falls back to the
/// within-sample variance over `n2`. Sample `k` (in chain order) uses its
/// own random stream derived from `seed`.
pub fn mc_predict(
    traces: &[ChainTrace],
    ctx: &ModelContext,
    cross: &CrossGram,
    n2: usize,
    seed: u64,
) -> Result<PredictiveDistribution> {
    if n2 == 0 {
        return Err(Error::InvalidArgument("N2 must be at least 1".into()));
    }
    let samples: Vec<(&DVector<f64>, &DVector<f64>)> = traces
        .iter()
        .flat_map(|t| t.theta.iter().zip(&t.f))
        .collect();
    if samples.is_empty() {
        if traces.iter().any(|t| !t.theta.is_empty()) {
            return Err(Error::InvalidArgument(
                "traces hold no latent samples; rerun with store_f".into(),
            ));
        }
        return Err(Error::EmptyTrace);
    }
    let (m, q) = (ctx.m(), ctx.q());
    let per_sample: Vec<(DMatrix<f64>, DMatrix<f64>)> = samples
        .par_iter()
        .enumerate()
        .map(|(k, (theta, f))| {
            let mut hyper = HyperState::zeros(m, q);
            hyper.set_flat_theta(theta);
            let covs = ctx.covariances(&hyper)?;
            let pred = predictive_conditional(f, &covs, cross)?;
            let mut r = rng::stream(seed, "predict", k as u64);
            Ok(sample_average(&pred, n2, &mut r))
        })
        .collect::<Result<_>>()?;

    let n1 = per_sample.len();
    let (n_test, _) = per_sample[0].0.shape();
    let mut probs = DMatrix::zeros(n_test, m);
    for (avg, _) in &per_sample {
        probs += avg;
    }
    probs /= n1 as f64;
    let se = if n1 > 1 {
        let mut ss = DMatrix::zeros(n_test, m);
        for (avg, _) in &per_sample {
            let d = avg - &probs;
            ss += d.component_mul(&d);
        }
        (ss / ((n1 - 1) * n1) as f64).map(f64::sqrt)
    } else {
        (&per_sample[0].1 / n2 as f64).map(|v| v.max(0.0).sqrt())
    };
    Ok(PredictiveDistribution {
        probs,
        se,
        n1,
        n2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "class")]
pub enum Decision {
    Class(usize),
    Reject,
}

impl Decision {
    pub fn class(self) -> Option<usize> {
        match self {
            Decision::Class(c) => Some(c),
            Decision::Reject => None,
        }
    }
}

/// The most probable class (lowest index among ties) if its probability
/// reaches `threshold`, otherwise a rejection.
pub fn decide(probs: &[f64], threshold: f64) -> Decision {
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = c;
        }
    }
    if probs[best] >= threshold {
        Decision::Class(best)
    } else {
        Decision::Reject
    }
}

impl PredictiveDistribution {
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.probs.row(i).iter().copied().collect()
    }

    pub fn decisions(&self, threshold: f64) -> Vec<Decision> {
        (0..self.probs.nrows())
            .map(|i| decide(&self.row(i), threshold))
            .collect()
    }

    /// One row per subject: id, probabilities, standard errors, decided
    /// class and reject flag.
    pub fn write_csv(
        &self,
        path: &Path,
        subject_ids: &[String],
        classes: &[String],
        threshold: f64,
    ) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["subject_id".to_owned()];
        header.extend(classes.iter().map(|c| format!("p_{c}")));
        header.extend(classes.iter().map(|c| format!("se_{c}")));
        header.push("decision".into());
        header.push("rejected".into());
        w.write_record(&header)?;
        for (i, id) in subject_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(self.probs.row(i).iter().map(|v| v.to_string()));
            row.extend(self.se.row(i).iter().map(|v| v.to_string()));
            match decide(&self.row(i), threshold) {
                Decision::Class(c) => {
                    row.push(classes[c].clone());
                    row.push("false".into());
                }
                Decision::Reject => {
                    row.push(String::new());
                    row.push("true".into());
                }
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
