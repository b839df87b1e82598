//! Training objective: mean L1 in the pixel domain plus a weighted mean L1
//! over the real and imaginary half-plane spectra.

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub pixel: f64,
    pub freq: f64,
    pub total: f64,
    pub lambda: f64,
}

fn check<T: Scalar>(pred: &Var<T>, target: &Var<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(shape_err!("loss inputs differ in shape: {:?} vs {:?}", pred.shape(), target.shape()));
    }
    Ok(())
}

/// `mean |pred - target|`.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    check(pred, target)?;
    let d = g.sub(pred, target)?;
    let a = g.abs(&d)?;
    g.mean_all(&a)
}

/// `mean(|dRe| + |dIm|)` over all half-plane bins, i.e. the mean over the
/// stacked real and imaginary planes.
pub fn freq_loss<T: Scalar>(g: &mut Graph<T>, pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    check(pred, target)?;
    let d = g.sub(pred, target)?;
    let z = g.rfft2(&d)?;
    let a = g.abs(&z)?;
    g.mean_all(&a)
}

/// `pixel + lambda * freq`, plus the values that went into it.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, pred: &Var<T>, target: &Var<T>, lambda: f64) -> Result<(Var<T>, LossReport)> {
    let pixel = l1_loss(g, pred, target)?;
    let freq = freq_loss(g, pred, target)?;
    let weighted = g.scale(&freq, lambda)?;
    let total = g.add(&pixel, &weighted)?;
    let report = LossReport {
        pixel: pixel.value().item().as_f64(),
        freq: freq.value().item().as_f64(),
        total: total.value().item().as_f64(),
        lambda,
    };
    Ok((total, report))
}
