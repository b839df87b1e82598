//! Complex FFT kernels and the 2-D real-input transform pair.
//!
//! Power-of-two lengths use an iterative radix-2 Cooley-Tukey transform;
//! every other length goes through Bluestein's chirp-z reduction onto a
//! power-of-two convolution. Twiddles and chirps are computed in `f64` and
//! rounded once, so the 32-bit path sees correctly rounded constants.
//!
//! The forward transform is unnormalised; the inverse carries `1/n`.

use rayon::prelude::*;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Cx<T> {
    pub re: T,
    pub im: T,
}

impl<T: Scalar> Cx<T> {
    fn new(re: T, im: T) -> Self {
        Self { re, im }
    }

    fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }

    fn polar64(angle: f64) -> Self {
        Self::new(T::lit(angle.cos()), T::lit(angle.sin()))
    }

    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im + o.im)
    }

    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.im - o.im)
    }

    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }

    fn conj(self) -> Self {
        Self::new(self.re, -self.im)
    }
}

struct Radix2<T> {
    n: usize,
    twiddles: Vec<Cx<T>>,
    bitrev: Vec<u32>,
}

impl<T: Scalar> Radix2<T> {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let bits = n.trailing_zeros();
        let bitrev = (0..n as u32)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (32 - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|j| Cx::polar64(-2.0 * std::f64::consts::PI * j as f64 / n as f64))
            .collect();
        Self { n, twiddles, bitrev }
    }

    fn forward(&self, x: &mut [Cx<T>]) {
        let n = self.n;
        for (i, &r) in self.bitrev.iter().enumerate() {
            let r = r as usize;
            if i < r {
                x.swap(i, r);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for j in 0..half {
                    let w = self.twiddles[j * step];
                    let a = x[start + j];
                    let b = x[start + j + half].mul(w);
                    x[start + j] = a.add(b);
                    x[start + j + half] = a.sub(b);
                }
            }
            len <<= 1;
        }
    }
}

struct Bluestein<T> {
    n: usize,
    inner: Radix2<T>,
    chirp: Vec<Cx<T>>,
    kernel: Vec<Cx<T>>,
}

impl<T: Scalar> Bluestein<T> {
    fn new(n: usize) -> Self {
        let m = (2 * n - 1).next_power_of_two();
        let inner = Radix2::new(m);
        // exp(-i pi k^2 / n) with k^2 reduced mod 2n in exact integer arithmetic
        let chirp: Vec<Cx<T>> = (0..n as u128)
            .map(|k| {
                let r = (k * k) % (2 * n as u128);
                Cx::polar64(-std::f64::consts::PI * r as f64 / n as f64)
            })
            .collect();
        let mut kernel = vec![Cx::zero(); m];
        kernel[0] = chirp[0].conj();
        for k in 1..n {
            kernel[k] = chirp[k].conj();
            kernel[m - k] = chirp[k].conj();
        }
        inner.forward(&mut kernel);
        Self {
            n,
            inner,
            chirp,
            kernel,
        }
    }

    fn forward(&self, x: &mut [Cx<T>], scratch: &mut Vec<Cx<T>>) {
        let m = self.inner.n;
        scratch.clear();
        scratch.resize(m, Cx::zero());
        for k in 0..self.n {
            scratch[k] = x[k].mul(self.chirp[k]);
        }
        self.inner.forward(scratch);
        for (a, &b) in scratch.iter_mut().zip(&self.kernel) {
            *a = a.mul(b).conj();
        }
        // inverse via conjugation: ifft(y) = conj(fft(conj(y))) / m
        self.inner.forward(scratch);
        let inv_m = T::lit(1.0 / m as f64);
        for k in 0..self.n {
            let c = Cx::new(scratch[k].re * inv_m, -scratch[k].im * inv_m);
            x[k] = c.mul(self.chirp[k]);
        }
    }
}

enum Kind<T> {
    Trivial,
    Radix2(Radix2<T>),
    Bluestein(Bluestein<T>),
}

/// Reusable length-`n` complex transform.
pub(crate) struct FftPlan<T> {
    n: usize,
    kind: Kind<T>,
}

impl<T: Scalar> FftPlan<T> {
    pub fn new(n: usize) -> Self {
        let kind = match n {
            0 | 1 => Kind::Trivial,
            _ if n.is_power_of_two() => Kind::Radix2(Radix2::new(n)),
            _ => Kind::Bluestein(Bluestein::new(n)),
        };
        Self { n, kind }
    }

    /// Unnormalised forward transform in place.
    pub fn forward(&self, x: &mut [Cx<T>], scratch: &mut Vec<Cx<T>>) {
        debug_assert_eq!(x.len(), self.n);
        match &self.kind {
            Kind::Trivial => {}
            Kind::Radix2(p) => p.forward(x),
            Kind::Bluestein(p) => p.forward(x, scratch),
        }
    }

    /// Unnormalised inverse transform (positive exponent) in place.
    pub fn inverse(&self, x: &mut [Cx<T>], scratch: &mut Vec<Cx<T>>) {
        x.iter_mut().for_each(|v| *v = v.conj());
        self.forward(x, scratch);
        x.iter_mut().for_each(|v| *v = v.conj());
    }
}

/// Number of stored columns of the half-plane spectrum of a width-`w` signal.
pub(crate) fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Columns whose conjugate partner is themselves (DC and, for even `w`, Nyquist).
pub(crate) fn self_conjugate_column(l: usize, w: usize) -> bool {
    l == 0 || (w % 2 == 0 && l == w / 2)
}

fn rfft2_plane<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    row: &FftPlan<T>,
    col: &FftPlan<T>,
    re: &mut [T],
    im: &mut [T],
) {
    let wh = half_width(w);
    let mut buf = vec![Cx::zero(); w.max(h)];
    let mut scratch = Vec::new();
    let mut half = vec![Cx::zero(); h * wh];
    for y in 0..h {
        for (b, &v) in buf[..w].iter_mut().zip(&x[y * w..(y + 1) * w]) {
            *b = Cx::new(v, T::zero());
        }
        row.forward(&mut buf[..w], &mut scratch);
        for l in 0..wh {
            let mut v = buf[l];
            if self_conjugate_column(l, w) {
                v.im = T::zero();
            }
            half[y * wh + l] = v;
        }
    }
    for l in 0..wh {
        for y in 0..h {
            buf[y] = half[y * wh + l];
        }
        col.forward(&mut buf[..h], &mut scratch);
        for y in 0..h {
            re[y * wh + l] = buf[y].re;
            im[y * wh + l] = buf[y].im;
        }
    }
}

fn irfft2_plane<T: Scalar>(
    re: &[T],
    im: &[T],
    h: usize,
    w: usize,
    row: &FftPlan<T>,
    col: &FftPlan<T>,
    out: &mut [T],
) {
    let wh = half_width(w);
    let mut buf = vec![Cx::zero(); w.max(h)];
    let mut scratch = Vec::new();
    let mut half = vec![Cx::zero(); h * wh];
    for l in 0..wh {
        for y in 0..h {
            buf[y] = Cx::new(re[y * wh + l], im[y * wh + l]);
        }
        col.inverse(&mut buf[..h], &mut scratch);
        for y in 0..h {
            half[y * wh + l] = buf[y];
        }
    }
    let scale = T::lit(1.0 / (h * w) as f64);
    for y in 0..h {
        for k in 0..w {
            buf[k] = if k < wh {
                let mut v = half[y * wh + k];
                if self_conjugate_column(k, w) {
                    v.im = T::zero();
                }
                v
            } else {
                half[y * wh + (w - k)].conj()
            };
        }
        row.inverse(&mut buf[..w], &mut scratch);
        for (o, b) in out[y * w..(y + 1) * w].iter_mut().zip(&buf[..w]) {
            *o = b.re * scale;
        }
    }
}

/// Half-plane spectra of `planes` contiguous `h x w` real planes. Returns
/// `(re, im)`, each `planes * h * (w/2 + 1)` long.
pub(crate) fn rfft2<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let wh = half_width(w);
    let (row, col) = (FftPlan::new(w), FftPlan::new(h));
    let mut re = vec![T::zero(); planes * h * wh];
    let mut im = vec![T::zero(); planes * h * wh];
    re.par_chunks_mut(h * wh)
        .zip(im.par_chunks_mut(h * wh))
        .enumerate()
        .for_each(|(p, (r, i))| rfft2_plane(&x[p * h * w..(p + 1) * h * w], h, w, &row, &col, r, i));
    (re, im)
}

/// Inverse of [`rfft2`], including the `1/(h w)` factor. The imaginary parts
/// of self-conjugate bins are ignored, so any half-plane input maps to a real
/// image.
pub(crate) fn irfft2<T: Scalar>(re: &[T], im: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let wh = half_width(w);
    let (row, col) = (FftPlan::new(w), FftPlan::new(h));
    let mut out = vec![T::zero(); planes * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(p, o)| {
        let s = p * h * wh..(p + 1) * h * wh;
        irfft2_plane(&re[s.clone()], &im[s], h, w, &row, &col, o)
    });
    out
}
