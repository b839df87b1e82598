use std::sync::Arc;

use rayon::prelude::*;

use super::{Graph, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    /// Mirror without repeating the edge sample. Pads wider than the extent
    /// keep bouncing between the two edges; an extent of 1 repeats its sample.
    Reflect,
}

/// Source index along one axis for every padded position.
fn axis_map(n: usize, before: usize, after: usize, mode: PadMode) -> Vec<Option<usize>> {
    (0..n + before + after)
        .map(|p| {
            let i = p as isize - before as isize;
            let last = n as isize - 1;
            match mode {
                PadMode::Zeros => (0..n as isize).contains(&i).then_some(i as usize),
                PadMode::Reflect if last == 0 => Some(0),
                PadMode::Reflect => {
                    let r = i.rem_euclid(2 * last);
                    Some(if r > last { 2 * last - r } else { r } as usize)
                }
            }
        })
        .collect()
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    s: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.s == 1
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.ho {
                    let src = &plane[(oy * g.s + i) * g.w + j..];
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if g.s == 1 {
                        dst.copy_from_slice(&src[..g.wo]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox * g.s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let p = g.p();
    for c in 0..g.ci {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.ho {
                    let base = (oy * g.s + i) * g.w + j;
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    if g.s == 1 {
                        for (d, &v) in plane[base..base + g.wo].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    } else {
                        for (ox, &v) in src.iter().enumerate() {
                            let d = &mut plane[base + ox * g.s];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

fn dense_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (p, k) = (g.p(), g.k());
    let mut out = vec![T::zero(); g.n * g.co * p];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.n {
        let xn = &x[n * g.ci * g.h * g.w..(n + 1) * g.ci * g.h * g.w];
        let on = &mut out[n * g.co * p..(n + 1) * g.co * p];
        let src = if g.pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        matmul(w, src, on, g.co, k, p, false, false, false);
        if let Some(b) = b {
            for (row, &bv) in on.chunks_mut(p).zip(b) {
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

/// Gradients for input and weight of a dense convolution.
fn dense_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (p, k) = (g.p(), g.k());
    let plane = g.ci * g.h * g.w;
    let mut dx = need_x.then(|| vec![T::zero(); g.n * plane]);
    let mut dw = need_w.then(|| vec![T::zero(); g.co * k]);
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if g.pointwise() || !need_x { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.n {
        let xn = &x[n * plane..(n + 1) * plane];
        let dyn_ = &dy[n * g.co * p..(n + 1) * g.co * p];
        if let Some(dw) = dw.as_mut() {
            let src = if g.pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            matmul(dyn_, src, dw, g.co, p, k, false, true, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * plane..(n + 1) * plane];
            if g.pointwise() {
                matmul(w, dyn_, dxn, k, g.co, p, true, false, false);
            } else {
                matmul(w, dyn_, &mut dcols, k, g.co, p, true, false, false);
                col2im(g, &dcols, dxn);
                }
        }
    }
    (dx, dw)
}

fn depthwise_plane<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: T, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = bias);
    for i in 0..g.kh {
        for j in 0..g.kw {
            let wv = w[i * g.kw + j];
            for oy in 0..g.ho {
                let src = &x[(oy * g.s + i) * g.w + j..];
                let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                if g.s == 1 {
                    for (d, &s) in dst.iter_mut().zip(&src[..g.wo]) {
                        *d = *d + wv * s;
                    }
                } else {
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d = *d + wv * src[ox * g.s];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (hw, p, kk) = (g.h * g.w, g.p(), g.kh * g.kw);
    let mut out = vec![T::zero(); g.n * g.co * p];
    out.par_chunks_mut(p).enumerate().for_each(|(plane, o)| {
        let c = plane % g.ci;
        let bias = b.map_or(T::zero(), |b| b[c]);
        depthwise_plane(g, &x[plane * hw..(plane + 1) * hw], &w[c * kk..(c + 1) * kk], bias, o);
    });
    out
}

/// Stride-1 weight gradient of one plane. Four horizontal taps share each
/// load of the output gradient row.
fn depthwise_weight_grad_plane<T: Scalar>(g: &ConvGeom, xs: &[T], gy: &[T], acc: &mut [T]) {
    const L: usize = 8;
    let full = g.wo - g.wo % L;
    for i in 0..g.kh {
        let mut j = 0;
        while j < g.kw {
            let taps = (g.kw - j).min(4);
            let mut lanes = [[T::zero(); L]; 4];
            let mut tail = [T::zero(); 4];
            for oy in 0..g.ho {
                let row = &gy[oy * g.wo..(oy + 1) * g.wo];
                let src = &xs[(oy + i) * g.w + j..];
                for c in (0..full).step_by(L) {
                    let y = &row[c..c + L];
                    for (t, lane) in lanes.iter_mut().enumerate().take(taps) {
                        let x = &src[t + c..t + c + L];
                        for l in 0..L {
                            lane[l] = lane[l] + y[l] * x[l];
                        }
                    }
                }
                for ox in full..g.wo {
                    for (t, tl) in tail.iter_mut().enumerate().take(taps) {
                        *tl = *tl + row[ox] * src[t + ox];
                    }
                }
            }
            for t in 0..taps {
                let a = &lanes[t];
                acc[i * g.kw + j + t] = ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7])) + tail[t];
            }
            j += taps;
        }
    }
}

fn depthwise_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (hw, p, kk) = (g.h * g.w, g.p(), g.kh * g.kw);
    let dx = need_x.then(|| {
        let mut dx = vec![T::zero(); g.n * g.ci * hw];
        dx.par_chunks_mut(hw).enumerate().for_each(|(plane, d)| {
            let c = plane % g.ci;
            let wc = &w[c * kk..(c + 1) * kk];
            let gy = &dy[plane * p..(plane + 1) * p];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let wv = wc[i * g.kw + j];
                    for oy in 0..g.ho {
                        let base = (oy * g.s + i) * g.w + j;
                        let row = &gy[oy * g.wo..(oy + 1) * g.wo];
                        if g.s == 1 {
                            for (t, &gv) in d[base..base + g.wo].iter_mut().zip(row) {
                                *t = *t + wv * gv;
                            }
                        } else {
                            for (ox, &gv) in row.iter().enumerate() {
                                let t = &mut d[base + ox * g.s];
                                *t = *t + wv * gv;
                            }
                        }
                    }
                }
            }
        });
        dx
    });
    let dw = need_w.then(|| {
        let partial: Vec<Vec<T>> = (0..g.n * g.ci)
            .into_par_iter()
            .map(|plane| {
                let xs = &x[plane * hw..(plane + 1) * hw];
                let gy = &dy[plane * p..(plane + 1) * p];
                let mut acc = vec![T::zero(); kk];
                if g.s == 1 {
                    depthwise_weight_grad_plane(g, xs, gy, &mut acc);
                    return acc;
                }
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let mut s = T::zero();
                        for oy in 0..g.ho {
                            let src = &xs[(oy * g.s + i) * g.w + j..];
                            let row = &gy[oy * g.wo..(oy + 1) * g.wo];
                            for (ox, &gv) in row.iter().enumerate() {
                                s = s + gv * src[ox * g.s];
                            }
                        }
                        acc[i * g.kw + j] = s;
                    }
                }
                acc
            })
            .collect();
        let mut dw = vec![T::zero(); g.co * kk];
        for (plane, acc) in partial.iter().enumerate() {
            let c = plane % g.ci;
            for (d, &a) in dw[c * kk..(c + 1) * kk].iter_mut().zip(acc) {
                *d = *d + a;
            }
        }
        dw
    });
    (dx, dw)
}

impl<T: Scalar> Graph<T> {
    /// Pads the two spatial axes of an NCHW tensor by `[top, bottom, left, right]`.
    pub fn pad2d(&mut self, x: &Var<T>, pad: [usize; 4], mode: PadMode) -> Result<Var<T>> {
        let (n, c, h, w) = x.value().dims4()?;
        let rows = axis_map(h, pad[0], pad[1], mode);
        let cols = axis_map(w, pad[2], pad[3], mode);
        let (ph, pw) = (rows.len(), cols.len());
        let mut out = vec![T::zero(); n * c * ph * pw];
        let xd = x.value().data();
        out.par_chunks_mut(ph * pw).enumerate().for_each(|(plane, o)| {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for (y, r) in rows.iter().enumerate() {
                let Some(r) = r else { continue };
                for (xx, cc) in cols.iter().enumerate() {
                    if let Some(cc) = cc {
                        o[y * pw + xx] = src[r * w + cc];
                    }
                }
            }
        });
        let out = Tensor::from_parts(vec![n, c, ph, pw], out);
        self.record("pad2d", &[x], out, move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); n * c * h * w];
            dx.par_chunks_mut(h * w).enumerate().for_each(|(plane, d)| {
                let gp = &gd[plane * ph * pw..(plane + 1) * ph * pw];
                for (y, r) in rows.iter().enumerate() {
                    let Some(r) = r else { continue };
                    for (xx, cc) in cols.iter().enumerate() {
                        if let Some(cc) = cc {
                            let t = &mut d[r * w + cc];
                            *t = *t + gp[y * pw + xx];
                        }
                    }
                }
            });
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        })
    }

    /// Valid (unpadded) 2-D convolution. `w` is `[Co, Ci / groups, kh, kw]`;
    /// `groups` must be 1 or equal to the channel count (depthwise).
    pub fn conv2d(
        &mut self,
        x: &Var<T>,
        w: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        groups: usize,
    ) -> Result<Var<T>> {
        let (n, ci, h, wd) = x.value().dims4()?;
        let (co, wci, kh, kw) = w.value().dims4()?;
        let depthwise = groups == ci && groups > 1;
        if !(groups == 1 || depthwise) {
            return Err(contract_err!("groups must be 1 or {ci}, got {groups}"));
        }
        let expect_ci = if depthwise { 1 } else { ci };
        if wci != expect_ci || (depthwise && co != ci) {
            return Err(shape_err!(
                "weight {:?} incompatible with input {:?} and groups {groups}",
                w.shape(),
                x.shape()
            ));
        }
        if stride == 0 || kh > h || kw > wd {
            return Err(shape_err!("kernel {kh}x{kw} stride {stride} on {h}x{wd}"));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(shape_err!("bias {:?} for {co} output channels", b.shape()));
            }
        }
        let g = ConvGeom {
            n,
            ci,
            h,
            w: wd,
            co,
            kh,
            kw,
            s: stride,
            ho: (h - kh) / stride + 1,
            wo: (wd - kw) / stride + 1,
        };
        let bd = bias.map(|b| b.value().data());
        let out = if depthwise {
            depthwise_forward(&g, x.value().data(), w.value().data(), bd)
        } else {
            dense_forward(&g, x.value().data(), w.value().data(), bd)
        };
        let out = Tensor::from_parts(vec![n, co, g.ho, g.wo], out);
        let (xv, wv) = (Arc::clone(&x.value), Arc::clone(&w.value));
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let tag = if depthwise { "dwconv2d" } else { "conv2d" };
        self.record(tag, &inputs, out, move |dy, need| {
            let (dx, dw) = if depthwise {
                depthwise_backward(&g, xv.data(), wv.data(), dy.data(), need[0], need[1])
            } else {
                dense_backward(&g, xv.data(), wv.data(), dy.data(), need[0], need[1])
            };
            let mut grads = vec![
                dx.map(|d| Tensor::from_parts(vec![n, ci, h, wd], d)),
                dw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
            ];
            if need.len() == 3 {
                grads.push(need[2].then(|| {
                    let p = g.p();
                    let mut db = vec![T::zero(); co];
                    for (i, row) in dy.data().chunks(p).enumerate() {
                        db[i % co] = db[i % co] + row.iter().copied().sum();
                    }
                    Tensor::from_parts(vec![co], db)
                }));
            }
            grads
        })
    }
}
