//! Generalized (implicit) leapfrog for position-dependent metrics.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::hmc::{Outcome, DIVERGENCE_THRESHOLD};
use crate::error::Result;
use crate::linalg::CholeskyFactor;
use crate::rng::standard_normal_vec;

/// Quantities of a Riemannian target evaluated at one position.
#[derive(Debug, Clone)]
pub struct MetricPoint {
    pub log_density: f64,
    pub grad: DVector<f64>,
    /// Factor of `G(x)`.
    pub metric: CholeskyFactor,
    /// `½ Tr(G⁻¹ ∂G/∂x_k)` per coordinate.
    pub log_det_grad: DVector<f64>,
}

impl MetricPoint {
    /// `−log p + ½ log|G| + ½ pᵀG⁻¹p`
    pub fn hamiltonian(&self, p: &DVector<f64>) -> f64 {
        -self.log_density
            + 0.5 * self.metric.log_det()
            + 0.5 * self.metric.solve_lower(p).norm_squared()
    }
}

pub trait RiemannTarget {
    fn dim(&self) -> usize;
    /// Density, gradient, metric and log-determinant gradient at `x`.
    fn point(&mut self, x: &DVector<f64>) -> Result<MetricPoint>;
    /// Only the metric factor at `x`.
    fn metric(&mut self, x: &DVector<f64>) -> Result<CholeskyFactor>;
    /// `uᵀ (∂G/∂x_k) u` per coordinate.
    fn quad_grad(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImplicitSettings {
    pub step_size: f64,
    pub steps: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Relative round-trip tolerance; `None` skips the check.
    pub reversibility_tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegratorFailure {
    NotConverged,
    Numerical,
}

fn converged(new: &DVector<f64>, old: &DVector<f64>, tol: f64) -> bool {
    let change = (new - old).amax();
    change < tol * (1.0 + new.amax())
}

/// `∂H/∂x` at fixed position for momentum `p`.
fn dh_dx<T: RiemannTarget + ?Sized>(
    target: &T,
    x: &DVector<f64>,
    pt: &MetricPoint,
    p: &DVector<f64>,
) -> DVector<f64> {
    let u = pt.metric.solve(p);
    -&pt.grad + &pt.log_det_grad - target.quad_grad(x, &u) * 0.5
}

/// One generalized leapfrog step.
pub fn generalized_leapfrog_step<T: RiemannTarget + ?Sized>(
    target: &mut T,
    x: &DVector<f64>,
    p: &DVector<f64>,
    pt: &MetricPoint,
    settings: &ImplicitSettings,
) -> std::result::Result<(DVector<f64>, DVector<f64>, MetricPoint), IntegratorFailure> {
    let eps = settings.step_size;

    // implicit half step in momentum, position fixed
    let mut p_half = p.clone();
    let mut done = false;
    for _ in 0..settings.max_iters {
        let next = p - dh_dx(target, x, pt, &p_half) * (0.5 * eps);
        let ok = converged(&next, &p_half, settings.tol);
        p_half = next;
        if ok {
            done = true;
            break;
        }
    }
    if !done || !p_half.iter().all(|v| v.is_finite()) {
        return Err(IntegratorFailure::NotConverged);
    }

    // implicit full step in position
    let v0 = pt.metric.solve(&p_half);
    let mut x_new = x + &v0 * eps;
    let mut done = false;
    for _ in 0..settings.max_iters {
        let g = target.metric(&x_new).map_err(|_| IntegratorFailure::Numerical)?;
        let next = x + (&v0 + g.solve(&p_half)) * (0.5 * eps);
        let ok = converged(&next, &x_new, settings.tol);
        x_new = next;
        if ok {
            done = true;
            break;
        }
    }
    if !done || !x_new.iter().all(|v| v.is_finite()) {
        return Err(IntegratorFailure::NotConverged);
    }

    // explicit half step in momentum
    let pt_new = target.point(&x_new).map_err(|_| IntegratorFailure::Numerical)?;
    let p_new = &p_half - dh_dx(target, &x_new, &pt_new, &p_half) * (0.5 * eps);
    Ok((x_new, p_new, pt_new))
}

/// `settings.steps` generalized leapfrog steps.
pub fn integrate<T: RiemannTarget + ?Sized>(
    target: &mut T,
    x: &DVector<f64>,
    p: &DVector<f64>,
    pt: &MetricPoint,
    settings: &ImplicitSettings,
) -> std::result::Result<(DVector<f64>, DVector<f64>, MetricPoint), IntegratorFailure> {
    let (mut x, mut p, mut pt) = (x.clone(), p.clone(), pt.clone());
    for _ in 0..settings.steps {
        (x, p, pt) = generalized_leapfrog_step(target, &x, &p, &pt, settings)?;
    }
    Ok((x, p, pt))
}

/// One RM-HMC transition with momenta `~ N(0, G(x))` and the full
/// non-separable Hamiltonian in the acceptance test.
pub fn rmhmc_update_position_metric<T: RiemannTarget + ?Sized, R: Rng + ?Sized>(
    x: &DVector<f64>,
    current: Option<MetricPoint>,
    target: &mut T,
    settings: &ImplicitSettings,
    rng: &mut R,
) -> Result<(DVector<f64>, Outcome)> {
    let pt0 = match current {
        Some(pt) => pt,
        None => target.point(x)?,
    };
    let p0 = pt0.metric.mul_lower(&standard_normal_vec(rng, x.len()));
    let h0 = pt0.hamiltonian(&p0);
    let u: f64 = rng.random();
    let (x1, p1, pt1) = match integrate(target, x, &p0, &pt0, settings) {
        Ok(end) => end,
        Err(IntegratorFailure::NotConverged) => {
            return Ok((
                x.clone(),
                Outcome {
                    nonconverged: true,
                    delta_h: f64::NAN,
                    ..Default::default()
                },
            ))
        }
        Err(IntegratorFailure::Numerical) => return Ok((x.clone(), Outcome::divergence())),
    };
    if let Some(rtol) = settings.reversibility_tol {
        // the fixed points need not be unique, so an accepted move must be
        // retraced from its end point to keep the kernel reversible
        let back = integrate(target, &x1, &-&p1, &pt1, settings);
        let returned = match back {
            Ok((xb, pb, _)) => {
                (&xb - x).amax() <= rtol * (1.0 + x.amax())
                    && (&pb + &p0).amax() <= rtol * (1.0 + p0.amax())
            }
            Err(_) => false,
        };
        if !returned {
            return Ok((
                x.clone(),
                Outcome {
                    nonconverged: true,
                    delta_h: f64::NAN,
                    ..Default::default()
                },
            ));
        }
    }
    let delta_h = pt1.hamiltonian(&p1) - h0;
    if !delta_h.is_finite() || delta_h.abs() > DIVERGENCE_THRESHOLD {
        return Ok((x.clone(), Outcome::divergence()));
    }
    let accepted = u.ln() < -delta_h;
    Ok((
        if accepted { x1 } else { x.clone() },
        Outcome {
            accepted,
            delta_h,
            ..Default::default()
        },
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::DMatrix;

    /// Quartic target `exp(−x²/2 − x⁴/4)` whose metric `1 + x²` is its
    /// negative Hessian up to the constant `2x²`.
    pub(crate) struct Bowl;

    impl RiemannTarget for Bowl {
        fn dim(&self) -> usize {
            1
        }
        fn point(&mut self, x: &DVector<f64>) -> Result<MetricPoint> {
            let v = x[0];
            let g = 1.0 + v * v;
            Ok(MetricPoint {
                log_density: -0.5 * v * v - 0.25 * v.powi(4),
                grad: DVector::from_element(1, -v - v.powi(3)),
                metric: CholeskyFactor::from_lower(DMatrix::from_element(1, 1, g.sqrt())),
                log_det_grad: DVector::from_element(1, v / g),
            })
        }
        fn metric(&mut self, x: &DVector<f64>) -> Result<CholeskyFactor> {
            Ok(self.point(x)?.metric)
        }
        fn quad_grad(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, 2.0 * x[0] * u[0] * u[0])
        }
    }

    #[test]
    fn round_trip_returns_to_start() {
        let settings = ImplicitSettings {
            step_size: 0.2,
            steps: 10,
            max_iters: 50,
            tol: 1e-12,
            reversibility_tol: None,
        };
        let mut t = Bowl;
        let x0 = DVector::from_element(1, 0.7);
        let p0 = DVector::from_element(1, -1.1);
        let pt0 = t.point(&x0).unwrap();
        let (x1, p1, pt1) = integrate(&mut t, &x0, &p0, &pt0, &settings).unwrap();
        let (x2, p2, _) = integrate(&mut t, &x1, &(-p1), &pt1, &settings).unwrap();
        assert!((x2 - x0).amax() < 1e-6);
        assert!((-p2 - p0).amax() < 1e-6);
    }
}

