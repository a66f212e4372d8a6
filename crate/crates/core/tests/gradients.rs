mod common;

use common::random_instance;
use mkgp::model::{grad_f, grad_theta, log_joint, PriorConfig};
use nalgebra::DVector;

const H: f64 = 1e-5;

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

fn check(prior: PriorConfig, seed_base: u64) {
    for k in 0..50u64 {
        let seed = seed_base + k;
        let n = 3 + (k as usize % 10);
        let m = 2 + (k as usize % 3);
        let q = 1 + (k as usize % 3);
        let inst = random_instance(n, m, q, prior, seed);
        let ctx = &inst.ctx;
        let covs = ctx.covariances(&inst.hyper).unwrap();

        let analytic = grad_f(ctx, &inst.f, &covs);
        let fd = DVector::from_fn(m * n, |i, _| {
            let (mut up, mut down) = (inst.f.clone(), inst.f.clone());
            up[i] += H;
            down[i] -= H;
            (log_joint(ctx, &up, &inst.hyper, &covs) - log_joint(ctx, &down, &inst.hyper, &covs))
                / (2.0 * H)
        });
        let e = rel_err(&analytic, &fd);
        assert!(e < 1e-5, "grad_f seed {seed} (n={n}, m={m}, q={q}): {e:e}");

        let g = grad_theta(ctx, &inst.f, &inst.hyper, &covs);
        let analytic = DVector::from_fn(m * q, |k, _| g[(k / q, k % q)]);
        let fd = DVector::from_fn(m * q, |k, _| {
            let eval = |delta: f64| {
                let mut h = inst.hyper.clone();
                h.theta[(k / q, k % q)] += delta;
                let c = ctx.covariances(&h).unwrap();
                log_joint(ctx, &inst.f, &h, &c)
            };
            (eval(H) - eval(-H)) / (2.0 * H)
        });
        let e = rel_err(&analytic, &fd);
        assert!(e < 1e-5, "grad_theta seed {seed} (n={n}, m={m}, q={q}): {e:e}");
    }
}

#[test]
fn gradients_match_finite_differences_under_gamma_prior() {
    check(PriorConfig::default(), 100);
}

#[test]
fn gradients_match_finite_differences_under_dirichlet_prior() {
    check(PriorConfig::dirichlet(), 200);
}

#[test]
fn gradient_stays_exact_at_very_small_weights() {
    let mut inst = random_instance(5, 2, 2, PriorConfig::default(), 7);
    inst.hyper.theta.fill(-20.0);
    let ctx = &inst.ctx;
    let covs = ctx.covariances(&inst.hyper).unwrap();
    // latents on the prior scale, otherwise f'K⁻¹f grows like e^20
    inst.f = mkgp::model::color(&inst.f, &covs);
    let g = grad_theta(ctx, &inst.f, &inst.hyper, &covs);
    let prior = mkgp::model::prior_grad_theta(&inst.hyper, &ctx.prior);
    for p in prior.iter() {
        assert!((p - 2.0).abs() < 1e-8, "Gamma(2, 2) prior term tends to the shape: {p}");
    }
    for k in 0..4 {
        let eval = |delta: f64| {
            let mut h = inst.hyper.clone();
            h.theta[(k / 2, k % 2)] += delta;
            let c = ctx.covariances(&h).unwrap();
            log_joint(ctx, &inst.f, &h, &c)
        };
        let fd = (eval(H) - eval(-H)) / (2.0 * H);
        let a = g[(k / 2, k % 2)];
        assert!(a.is_finite() && (a - fd).abs() < 1e-5 * fd.abs().max(1.0), "{a} vs {fd}");
    }
}
