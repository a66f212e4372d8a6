use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::hmc::Outcome;
use crate::error::Result;
use crate::model::sample_log_dirichlet;
use crate::rng::standard_normal_vec;

/// Gaussian random-walk Metropolis step `x' = x + step·z`.
///
/// `current` is the log-density at `x`. A proposal whose density cannot be
/// evaluated is rejected. Returns the new state and its log-density.
pub fn mh_update<F, R>(
    x: &DVector<f64>,
    current: f64,
    step: f64,
    mut log_density: F,
    rng: &mut R,
) -> (DVector<f64>, f64, Outcome)
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
    R: Rng + ?Sized,
{
    let proposal = x + standard_normal_vec(rng, x.len()) * step;
    let u: f64 = rng.random();
    match log_density(&proposal) {
        Ok(lp) if lp.is_finite() => {
            let accepted = u.ln() < lp - current;
            let out = Outcome {
                accepted,
                delta_h: current - lp,
                ..Default::default()
            };
            if accepted {
                (proposal, lp, out)
            } else {
                (x.clone(), current, out)
            }
        }
        _ => (x.clone(), current, Outcome::divergence()),
    }
}

/// Proposal settings for simplex-valued weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirichletProposal {
    /// Proposal `Dir(kappa·w + floor)`; larger means smaller moves.
    pub kappa: f64,
    pub floor: f64,
    /// Random-walk step on `log α`.
    pub alpha_step: f64,
    /// Include the Hastings ratio of the asymmetric proposal. Turning this
    /// off yields an incorrect sampler; it exists for negative controls.
    pub hastings: bool,
}

impl Default for DirichletProposal {
    fn default() -> Self {
        Self {
            kappa: 200.0,
            floor: 0.1,
            alpha_step: 0.5,
            hastings: true,
        }
    }
}

/// `log Dir(exp(log_w) | conc)` on the first `q − 1` coordinates.
fn dirichlet_log_pdf(log_w: &[f64], conc: &[f64]) -> f64 {
    let total: f64 = conc.iter().sum();
    ln_gamma(total) - conc.iter().map(|&a| ln_gamma(a)).sum::<f64>()
        + conc.iter().zip(log_w).map(|(a, l)| (a - 1.0) * l).sum::<f64>()
}

fn proposal_conc(log_w: &[f64], settings: &DirichletProposal) -> Vec<f64> {
    log_w
        .iter()
        .map(|l| settings.kappa * l.exp() + settings.floor)
        .collect()
}

/// Metropolis–Hastings on one simplex point, stored as log-weights.
/// Returns the new log-weights and their log-density.
pub fn mh_dirichlet_update<F, R>(
    log_w: &[f64],
    current: f64,
    settings: &DirichletProposal,
    mut log_density: F,
    rng: &mut R,
) -> (Vec<f64>, f64, Outcome)
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    let forward = proposal_conc(log_w, settings);
    let proposal = sample_log_dirichlet(&forward, rng);
    let u: f64 = rng.random();
    // a weight that underflows to zero leaves the open simplex
    if proposal.iter().any(|l| !l.is_finite() || l.exp() <= 0.0) {
        return (log_w.to_vec(), current, Outcome::divergence());
    }
    let lp = match log_density(&proposal) {
        Ok(lp) if lp.is_finite() => lp,
        _ => return (log_w.to_vec(), current, Outcome::divergence()),
    };
    let mut log_ratio = lp - current;
    if settings.hastings {
        let backward = proposal_conc(&proposal, settings);
        log_ratio += dirichlet_log_pdf(log_w, &backward) - dirichlet_log_pdf(&proposal, &forward);
    }
    let accepted = u.ln() < log_ratio;
    let out = Outcome {
        accepted,
        delta_h: -log_ratio,
        ..Default::default()
    };
    if accepted {
        (proposal, lp, out)
    } else {
        (log_w.to_vec(), current, out)
    }
}
