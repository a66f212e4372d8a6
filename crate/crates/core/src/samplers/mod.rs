//! MCMC for the latent functions and the kernel weights.
//!
//! A scan updates the latent block given the weights, then the weights given
//! the latent block. Under sufficient augmentation the weights are updated
//! with `f` held fixed; under ancillary augmentation with the whitened
//! `ν = L⁻¹f` held fixed, so `f` moves with every accepted weight proposal.

mod gibbs;
mod hmc;
mod mh;
mod rmhmc;
mod trace;

pub use gibbs::{pilot_step_size, run_chains, BlockStats, Chain, ChainState, LatentTarget, ScanFlags};
pub use hmc::{
    hmc_update, leapfrog, rmhmc_update_fixed_metric, Mass, Outcome, Target,
    DIVERGENCE_THRESHOLD,
};
pub use mh::{mh_dirichlet_update, mh_update, DirichletProposal};
pub use rmhmc::{
    generalized_leapfrog_step, integrate, rmhmc_update_position_metric, ImplicitSettings,
    IntegratorFailure, MetricPoint, RiemannTarget,
};
pub use trace::{first_abort, read_trace, write_trace, ChainTrace, TraceMeta};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative round-trip tolerance of the reversibility check.
pub const REVERSIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSampler {
    /// Explicit leapfrog, identity mass.
    Hmc,
    /// Explicit leapfrog with the homogeneous metric as mass.
    FixedMetric,
    /// Generalized leapfrog with the position-dependent Fisher metric.
    PositionMetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperSampler {
    /// Explicit leapfrog, identity mass.
    Hmc,
    /// Explicit leapfrog with a Fisher-metric mass (see [`Chain`]).
    MetricHmc,
    /// Gaussian random walk.
    Mh,
    /// Weights held at their initial value (all zero for the unweighted sum).
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Sufficient,
    Ancillary,
}

/// The six named combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    A,
    B,
    C,
    D,
    #[default]
    E,
    F,
}

impl Scheme {
    pub fn parts(self) -> (LatentSampler, HyperSampler, Augmentation) {
        use Augmentation::*;
        use HyperSampler as H;
        use LatentSampler as L;
        match self {
            Scheme::A => (L::Hmc, H::Hmc, Sufficient),
            Scheme::B => (L::FixedMetric, H::Hmc, Sufficient),
            Scheme::C => (L::PositionMetric, H::Hmc, Sufficient),
            Scheme::D => (L::PositionMetric, H::MetricHmc, Sufficient),
            Scheme::E => (L::FixedMetric, H::Mh, Ancillary),
            Scheme::F => (L::PositionMetric, H::Mh, Ancillary),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Scheme::A),
            "b" => Ok(Scheme::B),
            "c" => Ok(Scheme::C),
            "d" => Ok(Scheme::D),
            "e" => Ok(Scheme::E),
            "f" => Ok(Scheme::F),
            other => Err(Error::InvalidArgument(format!("unknown scheme {other:?}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scheme::A => "a",
            Scheme::B => "b",
            Scheme::C => "c",
            Scheme::D => "d",
            Scheme::E => "e",
            Scheme::F => "f",
        }
    }
}

/// Deliberate defects for negative-control tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// The weight update ignores the prior on the weights.
    DropHyperPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub scheme: Scheme,
    /// Overrides for the components implied by `scheme`.
    pub latent: Option<LatentSampler>,
    pub hyper: Option<HyperSampler>,
    pub augmentation: Option<Augmentation>,
    pub leapfrog_steps: usize,
    pub step_size_f: f64,
    pub step_size_theta: f64,
    pub implicit_iters: usize,
    pub implicit_tol: f64,
    /// Retrace every generalized-leapfrog trajectory and reject unless it
    /// returns to its start.
    pub reversibility_check: bool,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub dirichlet: DirichletProposal,
    /// Keep latent samples in the trace (needed for prediction).
    pub store_f: bool,
    pub fault: Option<Fault>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::E,
            latent: None,
            hyper: None,
            augmentation: None,
            leapfrog_steps: 10,
            step_size_f: 0.5,
            step_size_theta: 0.2,
            implicit_iters: 6,
            implicit_tol: 1e-8,
            reversibility_check: true,
            n_iterations: 2000,
            burn_in: 1000,
            thin: 1,
            n_chains: 4,
            seed: 0,
            dirichlet: DirichletProposal::default(),
            store_f: true,
            fault: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_owned()));
        if !(self.step_size_f > 0.0 && self.step_size_theta > 0.0) {
            return bad("step sizes must be positive");
        }
        if self.leapfrog_steps < 1 {
            return bad("leapfrog_steps must be at least 1");
        }
        if self.thin < 1 {
            return bad("thin must be at least 1");
        }
        if self.n_chains < 1 {
            return bad("n_chains must be at least 1");
        }
        if self.implicit_iters < 1 || !(self.implicit_tol > 0.0) {
            return bad("implicit_iters must be ≥ 1 and implicit_tol > 0");
        }
        if self.burn_in > self.n_iterations {
            return bad("burn_in exceeds n_iterations");
        }
        if !(self.dirichlet.kappa > 0.0 && self.dirichlet.floor > 0.0 && self.dirichlet.alpha_step > 0.0)
        {
            return bad("Dirichlet proposal parameters must be positive");
        }
        Ok(())
    }

    pub fn parts(&self) -> (LatentSampler, HyperSampler, Augmentation) {
        let (l, h, a) = self.scheme.parts();
        (
            self.latent.unwrap_or(l),
            self.hyper.unwrap_or(h),
            self.augmentation.unwrap_or(a),
        )
    }

    /// Number of samples kept per chain.
    pub fn kept_samples(&self) -> usize {
        (self.n_iterations - self.burn_in) / self.thin
    }

    pub(crate) fn implicit(&self) -> ImplicitSettings {
        ImplicitSettings {
            step_size: self.step_size_f,
            steps: self.leapfrog_steps,
            max_iters: self.implicit_iters,
            tol: self.implicit_tol,
            reversibility_tol: self.reversibility_check.then_some(REVERSIBILITY_TOL),
        }
    }
}
