#![allow(dead_code)]

use std::sync::Arc;

use mkgp::data::LabelSet;
use mkgp::kernels::GramSet;
use mkgp::model::{HyperState, ModelContext, PriorConfig};
use mkgp::rng::{self, SimRng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// `q` full-rank Gram matrices `X Xᵀ / d` with `d = n + 2`.
pub fn random_grams(n: usize, q: usize, r: &mut SimRng) -> GramSet {
    let d = n + 2;
    let grams = (0..q)
        .map(|_| {
            let x = DMatrix::from_fn(n, d, |_, _| rng::standard_normal(r));
            &x * x.transpose() / d as f64
        })
        .collect();
    GramSet::from_matrices((0..q).map(|s| format!("m{s}")).collect(), grams).unwrap()
}

pub struct Instance {
    pub ctx: ModelContext,
    pub hyper: HyperState,
    pub f: DVector<f64>,
}

/// Random model with labels, weights near the prior bulk and moderate latents.
pub fn random_instance(n: usize, m: usize, q: usize, prior: PriorConfig, seed: u64) -> Instance {
    let mut r = rng::seeded(seed);
    let grams = Arc::new(random_grams(n, q, &mut r));
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
    let labels = LabelSet::from_indices(labels, m).unwrap();
    let ctx = ModelContext::new(grams, &labels, prior).unwrap();
    let hyper = prior.sample(m, q, &mut r);
    let f = DVector::from_fn(m * n, |_, _| rng::standard_normal(&mut r));
    Instance { ctx, hyper, f }
}
