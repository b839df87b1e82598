use rayon::prelude::*;

use super::{Graph, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type Bins = Vec<(usize, usize)>;

fn adaptive_bins(n: usize, out: usize) -> Bins {
    (0..out).map(|i| (i * n / out, ((i + 1) * n).div_ceil(out))).collect()
}

fn sliding_bins(n: usize, k: usize, stride: usize) -> Bins {
    (0..(n - k) / stride + 1).map(|i| (i * stride, i * stride + k)).collect()
}

/// Source taps `(i0, i1, weight of i1)` for half-pixel bilinear resampling.
fn linear_taps(n: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    fn window_max(&mut self, tag: &'static str, x: &Var<T>, rows: Bins, cols: Bins) -> Result<Var<T>> {
        let (n, c, h, w) = x.value().dims4()?;
        let (ho, wo) = (rows.len(), cols.len());
        let xd = x.value().data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut arg = vec![0u32; n * c * ho * wo];
        out.par_chunks_mut(ho * wo)
            .zip(arg.par_chunks_mut(ho * wo))
            .enumerate()
            .for_each(|(plane, (o, a))| {
                let src = &xd[plane * h * w..(plane + 1) * h * w];
                for (oy, &(y0, y1)) in rows.iter().enumerate() {
                    for (ox, &(x0, x1)) in cols.iter().enumerate() {
                        let mut best = y0 * w + x0;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                if src[y * w + xx] > src[best] {
                                    best = y * w + xx;
                                }
                            }
                        }
                        o[oy * wo + ox] = src[best];
                        a[oy * wo + ox] = best as u32;
                    }
                }
            });
        let out = Tensor::from_parts(vec![n, c, ho, wo], out);
        self.record(tag, &[x], out, move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); n * c * h * w];
            for (plane, d) in dx.chunks_mut(h * w).enumerate() {
                let range = plane * ho * wo..(plane + 1) * ho * wo;
                for (&a, &gv) in arg[range.clone()].iter().zip(&gd[range]) {
                    d[a as usize] = d[a as usize] + gv;
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        })
    }

    /// Max over bins `[floor(i*H/Ho), ceil((i+1)*H/Ho))`. Ties pick the first
    /// sample in row-major order.
    pub fn adaptive_max_pool(&mut self, x: &Var<T>, ho: usize, wo: usize) -> Result<Var<T>> {
        let (_, _, h, w) = x.value().dims4()?;
        if ho == 0 || wo == 0 || ho > h || wo > w {
            return Err(shape_err!("adaptive pool {h}x{w} -> {ho}x{wo}"));
        }
        self.window_max("adaptive_max_pool", x, adaptive_bins(h, ho), adaptive_bins(w, wo))
    }

    /// Valid `k x k` max pool.
    pub fn max_pool2d(&mut self, x: &Var<T>, k: usize, stride: usize) -> Result<Var<T>> {
        let (_, _, h, w) = x.value().dims4()?;
        if k == 0 || stride == 0 || k > h || k > w {
            return Err(shape_err!("max pool {k}x{k} stride {stride} on {h}x{w}"));
        }
        self.window_max("max_pool2d", x, sliding_bins(h, k, stride), sliding_bins(w, k, stride))
    }

    /// Bilinear resize with half-pixel centres (corners not aligned).
    pub fn upsample_bilinear(&mut self, x: &Var<T>, ho: usize, wo: usize) -> Result<Var<T>> {
        let (n, c, h, w) = x.value().dims4()?;
        if ho < h || wo < w {
            return Err(contract_err!("bilinear upsample target {ho}x{wo} is smaller than the {h}x{w} source"));
        }
        let ry: Vec<(usize, usize, T, T)> = linear_taps(h, ho)
            .into_iter()
            .map(|(a, b, l)| (a, b, T::lit(1.0 - l), T::lit(l)))
            .collect();
        let rx: Vec<(usize, usize, T, T)> = linear_taps(w, wo)
            .into_iter()
            .map(|(a, b, l)| (a, b, T::lit(1.0 - l), T::lit(l)))
            .collect();
        let xd = x.value().data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        out.par_chunks_mut(ho * wo).enumerate().for_each(|(plane, o)| {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ry.iter().enumerate() {
                let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
                for (ox, &(x0, x1, wx0, wx1)) in rx.iter().enumerate() {
                    o[oy * wo + ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
                }
            }
        });
        let out = Tensor::from_parts(vec![n, c, ho, wo], out);
        self.record("upsample_bilinear", &[x], out, move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); n * c * h * w];
            dx.par_chunks_mut(h * w).enumerate().for_each(|(plane, d)| {
                let gp = &gd[plane * ho * wo..(plane + 1) * ho * wo];
                for (oy, &(y0, y1, wy0, wy1)) in ry.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in rx.iter().enumerate() {
                        let gv = gp[oy * wo + ox];
                        for (r, wy) in [(y0, wy0), (y1, wy1)] {
                            for (cc, wx) in [(x0, wx0), (x1, wx1)] {
                                let t = &mut d[r * w + cc];
                                *t = *t + gv * wy * wx;
                            }
                        }
                    }
                }
            });
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        })
    }
}
