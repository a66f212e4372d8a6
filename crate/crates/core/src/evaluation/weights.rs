use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PriorConfig;
use crate::samplers::ChainTrace;

/// Linearly interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightQuartiles {
    pub class: usize,
    pub source: usize,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub mean: f64,
    /// Posterior probability that this weight exceeds the average weight of
    /// the other sources in the same class.
    pub prob_above_others: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSummary {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub prior_q25: f64,
    pub prior_q75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub sources: Vec<String>,
    pub samples: usize,
    pub weights: Vec<WeightQuartiles>,
    /// Present under the Dirichlet prior.
    pub concentration: Option<ConcentrationSummary>,
}

/// Quartiles of every weight `exp(θ_cs)` (a simplex coordinate under the
/// Dirichlet prior), pooled over all chains.
pub fn weight_posterior_summary(traces: &[ChainTrace], prior: &PriorConfig) -> Result<WeightSummary> {
    let draws: Vec<_> = traces.iter().flat_map(|t| t.theta.iter()).collect();
    if draws.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let meta = &traces[0].meta;
    let (m, q) = (meta.m, meta.q);
    let mut weights = Vec::with_capacity(m * q);
    for c in 0..m {
        for s in 0..q {
            let k = c * q + s;
            let mut w: Vec<f64> = draws.iter().map(|t| t[k].exp()).collect();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let prob_above_others = (q > 1).then(|| {
                let above = draws
                    .iter()
                    .filter(|t| {
                        let others: f64 =
                            (0..q).filter(|&r| r != s).map(|r| t[c * q + r].exp()).sum();
                        t[k].exp() > others / (q - 1) as f64
                    })
                    .count();
                above as f64 / draws.len() as f64
            });
            w.sort_by(f64::total_cmp);
            weights.push(WeightQuartiles {
                class: c,
                source: s,
                q25: quantile(&w, 0.25),
                median: quantile(&w, 0.5),
                q75: quantile(&w, 0.75),
                mean,
                prob_above_others,
            });
        }
    }
    let alphas: Vec<f64> = traces.iter().flat_map(|t| t.alpha.iter().copied()).collect();
    let concentration = if alphas.is_empty() {
        None
    } else {
        let rate = match *prior {
            PriorConfig::Dirichlet { alpha_rate } => alpha_rate,
            PriorConfig::Gamma { .. } => 1.0,
        };
        let mut a = alphas;
        a.sort_by(f64::total_cmp);
        Some(ConcentrationSummary {
            q25: quantile(&a, 0.25),
            median: quantile(&a, 0.5),
            q75: quantile(&a, 0.75),
            prior_q25: (4.0f64 / 3.0).ln() / rate,
            prior_q75: 4.0f64.ln() / rate,
        })
    };
    Ok(WeightSummary {
        sources: meta.modality_ids.clone(),
        samples: draws.len(),
        weights,
        concentration,
    })
}
