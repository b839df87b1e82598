//! Tensor-level spectral API: half-plane FFT, amplitude/phase split, polar
//! reconstruction and the amplitude-vs-phase perturbation experiment.
//!
//! The forward transform is unnormalised; the inverse scales by `1/(h*w)`.
//! Only the `w/2 + 1` non-redundant columns are stored.

use std::fmt;
use std::str::FromStr;

use crate::autograd::phase_of;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::fft;
use crate::metrics::psnr;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Half-plane spectrum of a real `[N, C, H, W]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum<T> {
    /// `[N, C, H, W/2 + 1]`.
    pub re: Tensor<T>,
    pub im: Tensor<T>,
    /// Source extents `(H, W)`.
    pub height: usize,
    pub width: usize,
}

/// Amplitude (`>= 0`) and phase (in `(-pi, pi]`) of a spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudePhase<T> {
    pub amplitude: Tensor<T>,
    pub phase: Tensor<T>,
    pub height: usize,
    pub width: usize,
}

pub fn fft2_real<T: Scalar>(x: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(shape_err!("fft2_real needs non-empty extents, got {h}x{w}"));
    }
    let (re, im) = fft::rfft2(x.data(), n * c, h, w);
    let shape = [n, c, h, fft::half_width(w)];
    Ok(ComplexSpectrum {
        re: Tensor::from_vec(&shape, re)?,
        im: Tensor::from_vec(&shape, im)?,
        height: h,
        width: w,
    })
}

pub fn ifft2_real<T: Scalar>(z: &ComplexSpectrum<T>) -> Result<Tensor<T>> {
    let (n, c, h, wh) = z.re.dims4()?;
    if z.im.shape() != z.re.shape() || h != z.height || wh != fft::half_width(z.width) {
        return Err(shape_err!(
            "spectrum planes {:?}/{:?} do not match source extents {}x{}",
            z.re.shape(),
            z.im.shape(),
            z.height,
            z.width
        ));
    }
    let x = fft::irfft2(z.re.data(), z.im.data(), n * c, h, z.width);
    Tensor::from_vec(&[n, c, h, z.width], x)
}

/// `sqrt(re^2 + im^2)`.
pub fn amplitude<T: Scalar>(z: &ComplexSpectrum<T>) -> Tensor<T> {
    z.re.zip_map(&z.im, |r, i| r.hypot(i)).expect("planes share a shape")
}

/// `atan2(im, re)` mapped into `(-pi, pi]`; the phase of `0 + 0j` is 0.
pub fn phase<T: Scalar>(z: &ComplexSpectrum<T>) -> Tensor<T> {
    z.re.zip_map(&z.im, phase_of).expect("planes share a shape")
}

impl<T: Scalar> AmplitudePhase<T> {
    pub fn of(z: &ComplexSpectrum<T>) -> Self {
        Self {
            amplitude: amplitude(z),
            phase: phase(z),
            height: z.height,
            width: z.width,
        }
    }
}

/// `A e^{jP}`. Negative amplitudes are clamped to zero; the second value is
/// how many were.
pub fn polar_reconstruct<T: Scalar>(ap: &AmplitudePhase<T>) -> Result<(ComplexSpectrum<T>, usize)> {
    if ap.amplitude.shape() != ap.phase.shape() {
        return Err(shape_err!(
            "amplitude {:?} and phase {:?} differ in shape",
            ap.amplitude.shape(),
            ap.phase.shape()
        ));
    }
    let clamps = ap.amplitude.data().iter().filter(|&&a| a < T::zero()).count();
    let a = ap.amplitude.map(|a| a.max(T::zero()));
    Ok((
        ComplexSpectrum {
            re: a.zip_map(&ap.phase, |a, p| if a == T::zero() { T::zero() } else { a * p.cos() })?,
            im: a.zip_map(&ap.phase, |a, p| if a == T::zero() { T::zero() } else { a * p.sin() })?,
            height: ap.height,
            width: ap.width,
        },
        clamps,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Amplitude,
    Phase,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Amplitude => "amplitude",
            Component::Phase => "phase",
        })
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amplitude" => Ok(Component::Amplitude),
            "phase" => Ok(Component::Phase),
            _ => Err(contract_err!("unknown spectral component `{s}`")),
        }
    }
}

fn wrap_phase(p: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let w = p - tau * ((p + std::f64::consts::PI) / tau).floor();
    if w <= -std::f64::consts::PI {
        w + tau
    } else {
        w
    }
}

/// Perturbs one spectral component of `img` and returns the clamped image.
///
/// Every bin except DC draws `u ~ U(-1, 1)`. Phase becomes
/// `wrap(P + pi * eps * u)`; amplitude becomes `max(A (1 + eps u), 0)`.
/// The draws depend only on `rng` and the bin order, so the same stream
/// gives the same `u` for every component and `eps`.
pub fn perturb_spectrum<T: Scalar>(img: &Tensor<T>, component: Component, eps: f64, rng: &mut SeededRng) -> Result<Tensor<T>> {
    if !(eps >= 0.0) {
        return Err(contract_err!("perturbation eps must be >= 0, got {eps}"));
    }
    let z = fft2_real(img)?;
    let mut ap = AmplitudePhase::of(&z);
    let (_, _, h, wh) = z.re.dims4()?;
    let plane = h * wh;
    let target = match component {
        Component::Amplitude => &mut ap.amplitude,
        Component::Phase => &mut ap.phase,
    };
    for (i, v) in target.data_mut().iter_mut().enumerate() {
        if i % plane == 0 {
            continue;
        }
        let u = rng.uniform(-1.0, 1.0);
        let x = v.as_f64();
        let y = match component {
            Component::Amplitude => (x * (1.0 + eps * u)).max(0.0),
            Component::Phase => wrap_phase(x + std::f64::consts::PI * eps * u),
        };
        *v = T::lit(y);
    }
    let (z2, _) = polar_reconstruct(&ap)?;
    Ok(ifft2_real(&z2)?.map(|v| v.max(T::zero()).min(T::one())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbRow {
    pub image: String,
    pub component: Component,
    pub eps: f64,
    pub seed: u64,
    pub psnr_db: f64,
}

pub const PERTURB_CSV_HEADER: &str = "image,component,eps,seed,psnr_db";

/// PSNR of every `(image, component, eps, seed)` cell. The noise stream for
/// a cell is `substream(seed, image index)`.
pub fn perturbation_experiment<T: Scalar>(images: &[(String, Tensor<T>)], eps_grid: &[f64], seeds: &[u64]) -> Result<Vec<PerturbRow>> {
    if images.is_empty() {
        return Err(contract_err!("perturbation experiment needs at least one image"));
    }
    let mut rows = Vec::new();
    for (idx, (name, img)) in images.iter().enumerate() {
        for component in [Component::Amplitude, Component::Phase] {
            for &eps in eps_grid {
                for &seed in seeds {
                    let mut rng = SeededRng::substream(seed, idx as u64);
                    let out = perturb_spectrum(img, component, eps, &mut rng)?;
                    rows.push(PerturbRow {
                        image: name.clone(),
                        component,
                        eps,
                        seed,
                        psnr_db: psnr(&out, img, 1.0)?,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn perturb_csv(rows: &[PerturbRow]) -> String {
    let mut s = String::from(PERTURB_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{},{:.6}\n", r.image, r.component, r.eps, r.seed, r.psnr_db));
    }
    s
}

/// Mean PSNR over images and seeds for one `(component, eps)` cell.
pub fn mean_psnr(rows: &[PerturbRow], component: Component, eps: f64) -> Option<f64> {
    let sel: Vec<f64> = rows
        .iter()
        .filter(|r| r.component == component && r.eps == eps)
        .map(|r| r.psnr_db)
        .collect();
    (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_lands_in_half_open_interval() {
        let pi = std::f64::consts::PI;
        assert!((wrap_phase(pi + 0.5) - (-pi + 0.5)).abs() < 1e-12);
        assert_eq!(wrap_phase(-pi), pi);
        assert_eq!(wrap_phase(0.3), 0.3);
    }

    #[test]
    fn three_four_five() {
        let z = ComplexSpectrum {
            re: Tensor::from_vec(&[1, 1, 1, 1], vec![3.0f64]).unwrap(),
            im: Tensor::from_vec(&[1, 1, 1, 1], vec![4.0]).unwrap(),
            height: 1,
            width: 1,
        };
        assert_eq!(amplitude(&z).item(), 5.0);
        assert_eq!(phase(&z).item(), 4f64.atan2(3.0));
    }

    #[test]
    fn zero_amplitude_gives_exact_zero_bin() {
        let ap = AmplitudePhase {
            amplitude: Tensor::from_vec(&[1, 1, 1, 2], vec![0.0f64, -1.0]).unwrap(),
            phase: Tensor::from_vec(&[1, 1, 1, 2], vec![1.234, 2.0]).unwrap(),
            height: 1,
            width: 2,
        };
        let (z, clamps) = polar_reconstruct(&ap).unwrap();
        assert_eq!(clamps, 1);
        assert_eq!(z.re.data(), &[0.0, 0.0]);
        assert_eq!(z.im.data(), &[0.0, 0.0]);
    }

    #[test]
    fn empty_experiment_is_contract_error() {
        let r = perturbation_experiment::<f64>(&[], &[0.1], &[1]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
