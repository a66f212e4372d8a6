use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::CholeskyFactor;
use crate::rng::standard_normal_vec;

/// Energy changes beyond this are treated as numerical blow-ups.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// A differentiable log-density. Errors (e.g. a failed factorization at a
/// proposed point) cause the proposal to be rejected.
pub trait Target {
    fn dim(&self) -> usize;
    fn evaluate(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
}

/// Result of one Metropolis-corrected update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub accepted: bool,
    pub divergent: bool,
    pub nonconverged: bool,
    /// Change in the Hamiltonian (or negative log-density) of the proposal.
    pub delta_h: f64,
}

impl Outcome {
    pub(crate) fn divergence() -> Self {
        Outcome {
            divergent: true,
            delta_h: f64::INFINITY,
            ..Default::default()
        }
    }
}

/// Momentum covariance for a constant-metric integrator.
#[derive(Debug, Clone)]
pub enum Mass {
    Identity,
    /// Factor of the mass matrix `M`.
    Dense(CholeskyFactor),
}

impl Mass {
    pub fn dense(m: &DMatrix<f64>) -> Result<Self> {
        Ok(Mass::Dense(CholeskyFactor::exact(m)?))
    }

    pub fn draw_momentum<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> DVector<f64> {
        let z = standard_normal_vec(rng, dim);
        match self {
            Mass::Identity => z,
            Mass::Dense(l) => l.mul_lower(&z),
        }
    }

    /// `M⁻¹ p`
    pub fn velocity(&self, p: &DVector<f64>) -> DVector<f64> {
        match self {
            Mass::Identity => p.clone(),
            Mass::Dense(l) => l.solve(p),
        }
    }

    /// `½ pᵀ M⁻¹ p`
    pub fn kinetic(&self, p: &DVector<f64>) -> f64 {
        match self {
            Mass::Identity => 0.5 * p.norm_squared(),
            Mass::Dense(l) => 0.5 * l.solve_lower(p).norm_squared(),
        }
    }
}

/// Explicit leapfrog from `(x, p)` with gradient `grad` at `x`.
/// Returns the end point, its momentum, log-density and gradient.
pub fn leapfrog<T: Target + ?Sized>(
    target: &mut T,
    mass: &Mass,
    x: &DVector<f64>,
    p: &DVector<f64>,
    grad: &DVector<f64>,
    step_size: f64,
    steps: usize,
) -> Result<(DVector<f64>, DVector<f64>, f64, DVector<f64>)> {
    let mut x = x.clone();
    let mut p = p + grad * (0.5 * step_size);
    let mut logp = f64::NAN;
    let mut g = grad.clone();
    for step in 0..steps {
        x += mass.velocity(&p) * step_size;
        (logp, g) = target.evaluate(&x)?;
        let scale = if step + 1 == steps { 0.5 } else { 1.0 };
        p += &g * (scale * step_size);
    }
    Ok((x, p, logp, g))
}

/// One HMC transition with a constant mass matrix.
///
/// `current` is the log-density and gradient at `x`, if already known.
pub fn hmc_update<T: Target + ?Sized, R: Rng + ?Sized>(
    x: &DVector<f64>,
    current: Option<(f64, DVector<f64>)>,
    target: &mut T,
    mass: &Mass,
    step_size: f64,
    steps: usize,
    rng: &mut R,
) -> Result<(DVector<f64>, Outcome)> {
    let (logp0, grad0) = match current {
        Some(c) => c,
        None => target.evaluate(x)?,
    };
    let p0 = mass.draw_momentum(x.len(), rng);
    let h0 = -logp0 + mass.kinetic(&p0);
    let u: f64 = rng.random();
    let (x1, p1, logp1) = match leapfrog(target, mass, x, &p0, &grad0, step_size, steps) {
        Ok((x1, p1, logp1, _)) => (x1, p1, logp1),
        Err(_) => return Ok((x.clone(), Outcome::divergence())),
    };
    let h1 = -logp1 + mass.kinetic(&p1);
    let delta_h = h1 - h0;
    if !delta_h.is_finite() || delta_h.abs() > DIVERGENCE_THRESHOLD {
        return Ok((x.clone(), Outcome::divergence()));
    }
    let accepted = u.ln() < -delta_h;
    let out = if accepted { x1 } else { x.clone() };
    Ok((
        out,
        Outcome {
            accepted,
            delta_h,
            ..Default::default()
        },
    ))
}

/// HMC whose mass is a fixed metric `F` (momenta `~ N(0, F)`).
pub fn rmhmc_update_fixed_metric<T: Target + ?Sized, R: Rng + ?Sized>(
    x: &DVector<f64>,
    metric: &CholeskyFactor,
    target: &mut T,
    step_size: f64,
    steps: usize,
    rng: &mut R,
) -> Result<(DVector<f64>, Outcome)> {
    let mass = Mass::Dense(metric.clone());
    hmc_update(x, None, target, &mass, step_size, steps, rng)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng;
    use rand::SeedableRng;

    /// Zero-mean Gaussian with precision `P`.
    pub(crate) struct Gaussian {
        pub precision: DMatrix<f64>,
    }

    impl Target for Gaussian {
        fn dim(&self) -> usize {
            self.precision.nrows()
        }
        fn evaluate(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
            let px = &self.precision * x;
            Ok((-0.5 * x.dot(&px), -px))
        }
    }

    #[test]
    fn standard_normal_moments() {
        let mut target = Gaussian {
            precision: DMatrix::identity(1, 1),
        };
        let mut r = rng::SimRng::seed_from_u64(1);
        let mut x = DVector::zeros(1);
        let mut draws = Vec::new();
        for _ in 0..10_000 {
            x = hmc_update(&x, None, &mut target, &Mass::Identity, 0.3, 5, &mut r)
                .unwrap()
                .0;
            draws.push(x[0]);
        }
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((0.9..=1.1).contains(&var), "var {var}");
    }

    #[test]
    fn tiny_steps_always_accept() {
        let mut target = Gaussian {
            precision: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        };
        let mut r = rng::SimRng::seed_from_u64(2);
        let mut x = DVector::from_vec(vec![0.5, -0.3]);
        let mut accepted = 0;
        for _ in 0..2000 {
            let (nx, o) = hmc_update(&x, None, &mut target, &Mass::Identity, 1e-4, 10, &mut r)
                .unwrap();
            x = nx;
            accepted += o.accepted as usize;
        }
        assert!(accepted as f64 / 2000.0 > 0.999);
    }

    #[test]
    fn identity_fixed_metric_equals_plain_hmc() {
        let mut target = Gaussian {
            precision: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        };
        let eye = CholeskyFactor::from_lower(DMatrix::identity(2, 2));
        let mut r1 = rng::SimRng::seed_from_u64(3);
        let mut r2 = rng::SimRng::seed_from_u64(3);
        let mut a = DVector::from_vec(vec![1.0, 1.0]);
        let mut b = a.clone();
        for _ in 0..200 {
            a = hmc_update(&a, None, &mut target, &Mass::Identity, 0.4, 7, &mut r1)
                .unwrap()
                .0;
            b = rmhmc_update_fixed_metric(&b, &eye, &mut target, 0.4, 7, &mut r2)
                .unwrap()
                .0;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn true_precision_mass_accepts_almost_always() {
        let precision = DMatrix::from_row_slice(2, 2, &[50.0, 49.0, 49.0, 50.0]);
        let factor = CholeskyFactor::exact(&precision).unwrap();
        let mut target = Gaussian { precision };
        let mut r = rng::SimRng::seed_from_u64(4);
        let mut x = DVector::from_vec(vec![0.1, 0.0]);
        let mut accepted = 0;
        for _ in 0..2000 {
            let (nx, o) =
                rmhmc_update_fixed_metric(&x, &factor, &mut target, 0.5, 10, &mut r).unwrap();
            x = nx;
            accepted += o.accepted as usize;
        }
        assert!(accepted as f64 / 2000.0 > 0.95);
    }
}
