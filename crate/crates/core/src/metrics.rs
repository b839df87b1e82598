//! Image quality metrics on `[N, C, H, W]` tensors with values in `[0, peak]`.

use crate::error::{contract_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Returned by [`psnr`] when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    same_shape(pred, target)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.as_f64() - t.as_f64();
            d * d
        })
        .sum();
    Ok(s / pred.numel().max(1) as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

/// ITU-R BT.601 luma of each image, one `h*w` plane per batch entry.
/// Single-channel inputs are used as is.
fn luma<T: Scalar>(x: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let d = x.data();
    match c {
        1 => Ok((0..n).map(|i| d[i * hw..(i + 1) * hw].iter().map(|v| v.as_f64()).collect()).collect()),
        3 => Ok((0..n)
            .map(|i| {
                let base = i * 3 * hw;
                (0..hw)
                    .map(|p| {
                        0.299 * d[base + p].as_f64() + 0.587 * d[base + hw + p].as_f64() + 0.114 * d[base + 2 * hw + p].as_f64()
                    })
                    .collect()
            })
            .collect()),
        _ => Err(shape_err!("SSIM needs 1 or 3 channels, got {c}")),
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = g.iter().enumerate().map(|(i, gi)| gi * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = g.iter().enumerate().map(|(i, gi)| gi * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luma (11x11 Gaussian, sigma 1.5, peak 1), averaged
/// over valid window positions and the batch.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    same_shape(pred, target)?;
    let (_, _, h, w) = pred.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(contract_err!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let g = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (a, b) = (luma(pred)?, luma(target)?);
    let mut total = 0.0;
    for (x, y) in a.iter().zip(&b) {
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter(x, h, w, &g), filter(y, h, w, &g));
        let (sxx, syy, sxy) = (filter(&xx, h, w, &g), filter(&yy, h, w, &g), filter(&xy, h, w, &g));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (m1, m2) = (mx[i], my[i]);
            let v1 = sxx[i] - m1 * m1;
            let v2 = syy[i] - m2 * m2;
            let cov = sxy[i] - m1 * m2;
            acc += ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2)) / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / a.len() as f64)
}
