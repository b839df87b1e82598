#![allow(dead_code)]

use uhdres_core::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use uhdres_core::{Graph, Init, ParamStore, Result, SeededRng, Tensor, Var};

pub fn rand64(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Init::Uniform { lo: -1.0, hi: 1.0 }, Some(&mut SeededRng::new(seed))).unwrap()
}

pub fn rand32(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::create(shape, Init::Uniform { lo: -1.0, hi: 1.0 }, Some(&mut SeededRng::new(seed))).unwrap()
}

pub fn unit64(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Init::Uniform { lo: 0.0, hi: 1.0 }, Some(&mut SeededRng::new(seed))).unwrap()
}

pub fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

/// `sum(f(x) * r)` with a fixed random `r`.
pub fn weighted_sum(g: &mut Graph<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let r = g.constant(rand64(y.shape(), seed ^ 0x5eed));
    let p = g.mul(y, &r)?;
    g.sum_all(&p)
}

/// Finite-difference check of a parameter-free op at tolerance 1e-4.
pub fn check_op<F>(x: &Tensor<f64>, seed: u64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let mut store = ParamStore::new();
    let opts = GradCheckOptions {
        input_samples: 48,
        seed,
        ..GradCheckOptions::default()
    };
    grad_check(
        |g, x, _| {
            let y = f(g, x)?;
            weighted_sum(g, &y, seed)
        },
        x,
        &mut store,
        &opts,
    )
    .unwrap()
}
