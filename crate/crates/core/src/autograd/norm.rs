use std::sync::Arc;

use super::{Graph, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch statistics from a training-mode pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (M - 1) variance, the quantity blended into running stats.
    pub var_unbiased: Vec<T>,
}

fn check_affine<T: Scalar>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.value().dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!(
            "batch norm affine {:?}/{:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok((n, c, h * w))
}

/// Sums `f(channel, value_index)` over every element, per channel.
fn per_channel(n: usize, c: usize, hw: usize, mut f: impl FnMut(usize, usize) -> f64) -> Vec<f64> {
    let mut acc = vec![0.0; c];
    for b in 0..n {
        for (ch, a) in acc.iter_mut().enumerate() {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                *a += f(ch, i);
            }
        }
    }
    acc
}

impl<T: Scalar> Graph<T> {
    /// Normalises with the batch's own statistics.
    pub fn batch_norm_train(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<(Var<T>, BatchStats<T>)> {
        let (n, c, hw) = check_affine(x, gamma, beta)?;
        let m = n * hw;
        if m < 2 {
            return Err(contract_err!("training batch norm needs at least 2 samples per channel, got {m}"));
        }
        let xd = x.value().data();
        let mf = m as f64;
        let mean: Vec<f64> = per_channel(n, c, hw, |_, i| xd[i].as_f64())
            .into_iter()
            .map(|s| s / mf)
            .collect();
        let var: Vec<f64> = per_channel(n, c, hw, |ch, i| (xd[i].as_f64() - mean[ch]).powi(2))
            .into_iter()
            .map(|s| s / mf)
            .collect();
        let inv: Vec<T> = var.iter().map(|v| T::lit(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::lit(v)).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        for (i, (&xv, (h, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / hw) % c;
            *h = (xv - mean_t[ch]) * inv[ch];
            *o = gd[ch] * *h + bd[ch];
        }
        let stats = BatchStats {
            mean: mean_t,
            var_unbiased: var.iter().map(|v| T::lit(v * mf / (mf - 1.0))).collect(),
        };
        let shape = x.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out);
        let gv = Arc::clone(&gamma.value);
        let y = self.record("batch_norm", &[x, gamma, beta], out, move |g, need| {
            let gr = g.data();
            let sum_g = per_channel(n, c, hw, |_, i| gr[i].as_f64());
            let sum_gx = per_channel(n, c, hw, |_, i| (gr[i] * xhat[i]).as_f64());
            let dx = need[0].then(|| {
                let gamma = gv.data();
                let d = (0..gr.len())
                    .map(|i| {
                        let ch = (i / hw) % c;
                        let k = gamma[ch] * inv[ch] / T::lit(mf);
                        k * (T::lit(mf) * gr[i] - T::lit(sum_g[ch]) - xhat[i] * T::lit(sum_gx[ch]))
                    })
                    .collect();
                Tensor::from_parts(shape.clone(), d)
            });
            let to_t = |v: &[f64]| Tensor::from_parts(vec![c], v.iter().map(|&s| T::lit(s)).collect());
            vec![dx, need[1].then(|| to_t(&sum_gx)), need[2].then(|| to_t(&sum_g))]
        })?;
        Ok((y, stats))
    }

    /// Normalises with fixed (running) statistics; an affine map in `x`.
    pub fn batch_norm_eval(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        let (_, c, hw) = check_affine(x, gamma, beta)?;
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(shape_err!("running stats {:?}/{:?} for {c} channels", mean.shape(), var.shape()));
        }
        let inv: Vec<T> = var.data().iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let mu = mean.data().to_vec();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let xd = x.value().data();
        let out = xd
            .iter()
            .enumerate()
            .map(|(i, &xv)| {
                let ch = (i / hw) % c;
                gd[ch] * (xv - mu[ch]) * inv[ch] + bd[ch]
            })
            .collect();
        let shape = x.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out);
        let (xv, gv) = (Arc::clone(&x.value), Arc::clone(&gamma.value));
        self.record("batch_norm_eval", &[x, gamma, beta], out, move |g, need| {
            let gr = g.data();
            let xd = xv.data();
            let n = gr.len() / (c * hw);
            let dx = need[0].then(|| {
                let d = gr
                    .iter()
                    .enumerate()
                    .map(|(i, &gvv)| gvv * gv.data()[(i / hw) % c] * inv[(i / hw) % c])
                    .collect();
                Tensor::from_parts(shape.clone(), d)
            });
            let dgamma = need[1].then(|| {
                let s = per_channel(n, c, hw, |ch, i| (gr[i] * (xd[i] - mu[ch]) * inv[ch]).as_f64());
                Tensor::from_parts(vec![c], s.into_iter().map(T::lit).collect())
            });
            let dbeta = need[2].then(|| {
                let s = per_channel(n, c, hw, |_, i| gr[i].as_f64());
                Tensor::from_parts(vec![c], s.into_iter().map(T::lit).collect())
            });
            vec![dx, dgamma, dbeta]
        })
    }
}
