use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::Rng;
use crate::tensor::{ParamStore, Tensor2D};

pub fn rand_tensor(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor2D<f64> {
    Tensor2D::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

pub fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn unit_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    crate::tensor::normalize(&mut v);
    v
}

/// Fills every entry of `shapes` with N(0, scale²) values.
pub fn rand_params(rng: &mut Rng, shapes: &[(String, usize, usize)], scale: f64) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (name, r, c) in shapes {
        p.insert(name.clone(), rand_tensor(rng, *r, *c, scale));
    }
    p
}

/// Moves the gradients accumulated in `grads` onto `params`.
pub fn with_grads(params: &ParamStore<f64>, grads: &ParamStore<f64>) -> ParamStore<f64> {
    let mut out = params.clone();
    out.zero_grads();
    out.accumulate_grads(grads).unwrap();
    out
}
