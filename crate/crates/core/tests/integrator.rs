use mkgp::linalg::CholeskyFactor;
use mkgp::rng;
use mkgp::samplers::{
    integrate, leapfrog, rmhmc_update_position_metric, ImplicitSettings, Mass, MetricPoint,
    RiemannTarget, Target,
};
use mkgp::Result;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;

/// Independent coordinates with density `exp(−x²/2 − x⁴/4)` and metric `1 + x²`.
struct Bowl;

impl RiemannTarget for Bowl {
    fn dim(&self) -> usize {
        2
    }
    fn point(&mut self, x: &DVector<f64>) -> Result<MetricPoint> {
        let g = x.map(|v| 1.0 + v * v);
        Ok(MetricPoint {
            log_density: x.iter().map(|v| -0.5 * v * v - 0.25 * v.powi(4)).sum(),
            grad: x.map(|v| -v - v.powi(3)),
            metric: CholeskyFactor::from_lower(DMatrix::from_diagonal(&g.map(f64::sqrt))),
            log_det_grad: x.component_div(&g),
        })
    }
    fn metric(&mut self, x: &DVector<f64>) -> Result<CholeskyFactor> {
        Ok(self.point(x)?.metric)
    }
    fn quad_grad(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(2, |k, _| 2.0 * x[k] * u[k] * u[k])
    }
}

/// Zero-mean Gaussian with precision `P`, under a constant metric `P`.
struct Gaussian {
    precision: DMatrix<f64>,
    factor: CholeskyFactor,
}

impl Gaussian {
    fn new(precision: DMatrix<f64>) -> Self {
        let factor = CholeskyFactor::exact(&precision).unwrap();
        Self { precision, factor }
    }
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

impl RiemannTarget for Gaussian {
    fn dim(&self) -> usize {
        self.precision.nrows()
    }
    fn point(&mut self, x: &DVector<f64>) -> Result<MetricPoint> {
        let (log_density, grad) = self.evaluate(x)?;
        Ok(MetricPoint {
            log_density,
            grad,
            metric: self.factor.clone(),
            log_det_grad: DVector::zeros(x.len()),
        })
    }
    fn metric(&mut self, _: &DVector<f64>) -> Result<CholeskyFactor> {
        Ok(self.factor.clone())
    }
    fn quad_grad(&self, x: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }
}

fn settings(step_size: f64, steps: usize) -> ImplicitSettings {
    ImplicitSettings {
        step_size,
        steps,
        max_iters: 100,
        tol: 1e-12,
        reversibility_tol: None,
    }
}

#[test]
fn generalized_leapfrog_is_reversible() {
    let mut target = Bowl;
    let mut r = rng::seeded(3);
    for _ in 0..20 {
        let x0 = rng::standard_normal_vec(&mut r, 2);
        let p0 = rng::standard_normal_vec(&mut r, 2) * 1.5;
        let pt0 = target.point(&x0).unwrap();
        let s = settings(0.1, 15);
        let (x1, p1, pt1) = integrate(&mut target, &x0, &p0, &pt0, &s).unwrap();
        let (x2, p2, _) = integrate(&mut target, &x1, &-p1, &pt1, &s).unwrap();
        assert!((&x2 - &x0).amax() < 1e-6, "position drift {}", (&x2 - &x0).amax());
        assert!((-&p2 - &p0).amax() < 1e-6);
    }
}

fn slope(eps: &[f64], err: &[f64]) -> f64 {
    let lx: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ly: Vec<f64> = err.iter().map(|e| e.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / 4.0, ly.iter().sum::<f64>() / 4.0);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

#[test]
fn energy_error_is_second_order_in_step_size() {
    let precision = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
    let eps = [0.2, 0.1, 0.05, 0.025];
    let mut r = rng::seeded(11);
    let starts: Vec<(DVector<f64>, DVector<f64>)> = (0..20)
        .map(|_| (rng::standard_normal_vec(&mut r, 2), rng::standard_normal_vec(&mut r, 2)))
        .collect();

    // explicit leapfrog, identity mass
    let mut target = Gaussian::new(precision.clone());
    let rms = |e: f64, target: &mut Gaussian| {
        let steps = (1.0 / e).round() as usize;
        let mut ss = 0.0;
        for (x, p) in &starts {
            let (lp0, g0) = target.evaluate(x).unwrap();
            let (_, p1, lp1, _) = leapfrog(target, &Mass::Identity, x, p, &g0, e, steps).unwrap();
            let dh = (-lp1 + 0.5 * p1.norm_squared()) - (-lp0 + 0.5 * p.norm_squared());
            ss += dh * dh;
        }
        (ss / starts.len() as f64).sqrt()
    };
    let err: Vec<f64> = eps.iter().map(|&e| rms(e, &mut target)).collect();
    let b = slope(&eps, &err);
    assert!((b - 2.0).abs() < 0.3, "explicit leapfrog slope {b} from {err:?}");

    // generalized leapfrog on the non-Gaussian bowl
    let mut bowl = Bowl;
    let err: Vec<f64> = eps
        .iter()
        .map(|&e| {
            let s = settings(e, (1.0 / e).round() as usize);
            let mut ss = 0.0;
            for (x, p) in &starts {
                let pt0 = bowl.point(x).unwrap();
                let (_, p1, pt1) = integrate(&mut bowl, x, p, &pt0, &s).unwrap();
                let dh = pt1.hamiltonian(&p1) - pt0.hamiltonian(p);
                ss += dh * dh;
            }
            (ss / starts.len() as f64).sqrt()
        })
        .collect();
    let b = slope(&eps, &err);
    assert!((b - 2.0).abs() < 0.3, "generalized leapfrog slope {b} from {err:?}");
}

#[test]
fn constant_metric_reduces_to_explicit_leapfrog() {
    let precision = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]);
    let mut target = Gaussian::new(precision.clone());
    let mass = Mass::dense(&precision).unwrap();
    let mut r = rng::seeded(5);
    let s = ImplicitSettings {
        step_size: 0.3,
        steps: 10,
        max_iters: 6,
        tol: 1e-8,
        reversibility_tol: None,
    };
    for _ in 0..10 {
        let x = rng::standard_normal_vec(&mut r, 3);
        let p = rng::standard_normal_vec(&mut r, 3);
        let (_, g) = target.evaluate(&x).unwrap();
        let (xe, pe, _, _) = leapfrog(&mut target, &mass, &x, &p, &g, 0.3, 10).unwrap();
        let pt = target.point(&x).unwrap();
        let (xg, pg, _) = integrate(&mut target, &x, &p, &pt, &s).unwrap();
        let scale = 1.0 + xe.amax().max(pe.amax());
        assert!((&xg - &xe).amax() < s.tol * scale * 10.0, "{}", (&xg - &xe).amax());
        assert!((&pg - &pe).amax() < s.tol * scale * 10.0);
    }
}

/// CDF of one bowl coordinate by trapezoidal integration on [−6, 6].
fn bowl_cdf() -> impl Fn(f64) -> f64 {
    let (lo, hi, k) = (-6.0, 6.0, 120_000);
    let h = (hi - lo) / k as f64;
    let dens = |x: f64| (-0.5 * x * x - 0.25 * x.powi(4)).exp();
    let mut cum = vec![0.0; k + 1];
    for i in 1..=k {
        let (a, b) = (lo + (i - 1) as f64 * h, lo + i as f64 * h);
        cum[i] = cum[i - 1] + 0.5 * h * (dens(a) + dens(b));
    }
    let total = cum[k];
    move |x: f64| {
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        let pos = (x - lo) / h;
        let i = pos.floor() as usize;
        let t = pos - i as f64;
        (cum[i] * (1.0 - t) + cum[(i + 1).min(k)] * t) / total
    }
}

fn ks_p_value(mut draws: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    let d = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    // asymptotic Kolmogorov distribution
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for j in 1..100 {
        let j = j as f64;
        p += 2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

#[test]
fn position_metric_sampler_draws_from_the_bowl() {
    let mut target = Bowl;
    let mut r = rng::SimRng::seed_from_u64(21);
    let s = ImplicitSettings {
        step_size: 0.3,
        steps: 5,
        max_iters: 20,
        tol: 1e-10,
        reversibility_tol: Some(1e-6),
    };
    let mut x = DVector::zeros(2);
    let mut draws = Vec::new();
    for t in 0..30_000 {
        x = rmhmc_update_position_metric(&x, None, &mut target, &s, &mut r).unwrap().0;
        if t >= 1000 && t % 10 == 0 {
            draws.push(x[0]);
        }
    }
    let p = ks_p_value(draws, bowl_cdf());
    assert!(p > 0.01, "KS p = {p}");

    // sanity: the same KS code rejects a standard normal as the bowl
    let mut r = rng::SimRng::seed_from_u64(22);
    let normal: Vec<f64> = (0..2900).map(|_| rng::standard_normal(&mut r)).collect();
    assert!(ks_p_value(normal, bowl_cdf()) < 1e-3);
}
