//! Spectral ops. A spectrum travels through the graph as one real tensor of
//! shape `[2, N, C, H, W/2 + 1]`: real parts first, imaginary parts second.

use std::sync::Arc;

use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::fft::{self, half_width, self_conjugate_column};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn spectrum_dims<T: Scalar>(z: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *z.shape() {
        [2, n, c, h, wh] => Ok((n, c, h, wh)),
        _ => Err(shape_err!("expected a [2, N, C, H, Wh] spectrum, got {:?}", z.shape())),
    }
}

/// `c_l` weights: 1 on self-conjugate columns, 2 elsewhere.
fn column_weights<T: Scalar>(w: usize) -> Vec<T> {
    (0..half_width(w))
        .map(|l| if self_conjugate_column(l, w) { T::one() } else { T::lit(2.0) })
        .collect()
}

fn scale_columns<T: Scalar>(data: &mut [T], wh: usize, per_col: &[T], k: T) {
    for row in data.chunks_mut(wh) {
        for (v, &c) in row.iter_mut().zip(per_col) {
            *v = *v * c * k;
        }
    }
}

pub(crate) fn phase_of<T: Scalar>(re: T, im: T) -> T {
    if re == T::zero() && im == T::zero() {
        return T::zero();
    }
    let p = im.atan2(re);
    if p <= -T::PI() {
        T::PI()
    } else {
        p
    }
}

impl<T: Scalar> Graph<T> {
    /// Unnormalised half-plane 2-D FFT of a real `[N, C, H, W]` tensor.
    pub fn rfft2(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = x.value().dims4()?;
        let wh = half_width(w);
        let (mut re, im) = fft::rfft2(x.value().data(), n * c, h, w);
        re.extend(im);
        let out = Tensor::from_parts(vec![2, n, c, h, wh], re);
        self.record("rfft2", &[x], out, move |g, _| {
            let half = g.numel() / 2;
            let inv_c: Vec<T> = column_weights::<T>(w).into_iter().map(|c| T::one() / c).collect();
            let mut gre = g.data()[..half].to_vec();
            let mut gim = g.data()[half..].to_vec();
            let hw = T::from_usize_lossy(h * w);
            scale_columns(&mut gre, wh, &inv_c, hw);
            scale_columns(&mut gim, wh, &inv_c, hw);
            let dx = fft::irfft2(&gre, &gim, n * c, h, w);
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        })
    }

    /// Inverse of [`Graph::rfft2`] back to a real image of width `width`.
    pub fn irfft2(&mut self, z: &Var<T>, width: usize) -> Result<Var<T>> {
        let (n, c, h, wh) = spectrum_dims(z.value())?;
        if half_width(width) != wh {
            return Err(shape_err!("spectrum with {wh} columns cannot invert to width {width}"));
        }
        let half = z.value().numel() / 2;
        let d = z.value().data();
        let out = fft::irfft2(&d[..half], &d[half..], n * c, h, width);
        let out = Tensor::from_parts(vec![n, c, h, width], out);
        self.record("irfft2", &[z], out, move |g, _| {
            let (mut re, mut im) = fft::rfft2(g.data(), n * c, h, width);
            let cw = column_weights::<T>(width);
            let k = T::one() / T::from_usize_lossy(h * width);
            scale_columns(&mut re, wh, &cw, k);
            scale_columns(&mut im, wh, &cw, k);
            re.extend(im);
            vec![Some(Tensor::from_parts(vec![2, n, c, h, wh], re))]
        })
    }

    /// Modulus of every bin; the gradient at an exactly zero bin is zero.
    pub fn amplitude(&mut self, z: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, wh) = spectrum_dims(z.value())?;
        let half = z.value().numel() / 2;
        let d = z.value().data();
        let amp: Vec<T> = d[..half].iter().zip(&d[half..]).map(|(&r, &i)| r.hypot(i)).collect();
        let out = Tensor::from_parts(vec![n, c, h, wh], amp.clone());
        let zv = Arc::clone(&z.value);
        self.record("amplitude", &[z], out, move |g, _| {
            let d = zv.data();
            let mut dz = vec![T::zero(); 2 * half];
            for (k, (&gv, &a)) in g.data().iter().zip(&amp).enumerate() {
                if a > T::zero() {
                    dz[k] = gv * d[k] / a;
                    dz[half + k] = gv * d[half + k] / a;
                }
            }
            vec![Some(Tensor::from_parts(zv.shape().to_vec(), dz))]
        })
    }

    /// Argument of every bin in `(-pi, pi]`, with `arg(0) = 0` and a zero
    /// gradient there.
    pub fn phase(&mut self, z: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, wh) = spectrum_dims(z.value())?;
        let half = z.value().numel() / 2;
        let d = z.value().data();
        let p = d[..half].iter().zip(&d[half..]).map(|(&r, &i)| phase_of(r, i)).collect();
        let out = Tensor::from_parts(vec![n, c, h, wh], p);
        let zv = Arc::clone(&z.value);
        self.record("phase", &[z], out, move |g, _| {
            let d = zv.data();
            let mut dz = vec![T::zero(); 2 * half];
            for (k, &gv) in g.data().iter().enumerate() {
                let (r, i) = (d[k], d[half + k]);
                let a2 = r * r + i * i;
                if a2 > T::zero() {
                    dz[k] = -gv * i / a2;
                    dz[half + k] = gv * r / a2;
                }
            }
            vec![Some(Tensor::from_parts(zv.shape().to_vec(), dz))]
        })
    }

    /// `A e^{iP}` as a stacked spectrum. Negative amplitudes are clamped to
    /// zero, counted in [`Graph::polar_clamps`], and pass no gradient.
    pub fn polar(&mut self, a: &Var<T>, p: &Var<T>) -> Result<Var<T>> {
        if a.shape() != p.shape() || a.shape().len() != 4 {
            return Err(shape_err!("polar needs matching rank-4 A/P, got {:?} and {:?}", a.shape(), p.shape()));
        }
        let mut shape = vec![2];
        shape.extend_from_slice(a.shape());
        let half = a.value().numel();
        let (ad, pd) = (a.value().data(), p.value().data());
        let mut clamps = 0;
        let amp: Vec<T> = ad
            .iter()
            .map(|&v| {
                if v < T::zero() {
                    clamps += 1;
                    T::zero()
                } else {
                    v
                }
            })
            .collect();
        self.polar_clamps += clamps;
        let mut out = vec![T::zero(); 2 * half];
        for k in 0..half {
            let (s, c) = pd[k].sin_cos();
            out[k] = amp[k] * c;
            out[half + k] = amp[k] * s;
        }
        let out = Tensor::from_parts(shape, out);
        let (av, pv) = (Arc::clone(&a.value), Arc::clone(&p.value));
        self.record("polar", &[a, p], out, move |g, need| {
            let gd = g.data();
            let (ad, pd) = (av.data(), pv.data());
            let mut da = vec![T::zero(); half];
            let mut dp = vec![T::zero(); half];
            for k in 0..half {
                let (s, c) = pd[k].sin_cos();
                let (gr, gi) = (gd[k], gd[half + k]);
                if ad[k] >= T::zero() {
                    da[k] = gr * c + gi * s;
                }
                let a = ad[k].max(T::zero());
                dp[k] = a * (gi * c - gr * s);
            }
            let shape = av.shape().to_vec();
            vec![
                need[0].then(|| Tensor::from_parts(shape.clone(), da)),
                need[1].then(|| Tensor::from_parts(shape, dp)),
            ]
        })
    }
}
