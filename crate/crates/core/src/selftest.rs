//! Built-in invariant suites: per-block and full-model gradient checks,
//! spectral identities, SGFN weight sharing, the zero-head identity and the
//! checkpoint round trip.

use std::fmt;

use crate::autograd::{Graph, Var};
use crate::blocks::{BlockConfig, Daeb, Dsmb, Msca, Samu, Sgfn, Sru, Ssfm};
use crate::config::UHDResConfig;
use crate::error::Result;
use crate::fft;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::model::UHDResModel;
use crate::nn::{Ctx, Mode};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::{DType, Scalar};
use crate::spectral::{fft2_real, ifft2_real, polar_reconstruct, AmplitudePhase, ComplexSpectrum};
use crate::tensor::{Init, Tensor};

pub const BLOCK_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Msca,
    Samu,
    Sru,
    Dsmb,
    Ssfm,
    Sgfn,
    Daeb,
}

pub const ALL_BLOCKS: [BlockKind; 7] = [
    BlockKind::Msca,
    BlockKind::Samu,
    BlockKind::Sru,
    BlockKind::Dsmb,
    BlockKind::Ssfm,
    BlockKind::Sgfn,
    BlockKind::Daeb,
];

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

enum AnyBlock {
    Msca(Msca),
    Samu(Samu),
    Sru(Sru),
    Dsmb(Dsmb),
    Ssfm(Ssfm),
    Sgfn(Sgfn),
    Daeb(Daeb),
}

impl AnyBlock {
    fn forward(&self, cx: &mut Ctx<'_, f64>, x: &Var<f64>) -> Result<Var<f64>> {
        match self {
            AnyBlock::Msca(b) => b.forward(cx, x),
            AnyBlock::Samu(b) => b.forward(cx, x),
            AnyBlock::Sru(b) => b.forward(cx, x),
            AnyBlock::Dsmb(b) => b.forward(cx, x),
            AnyBlock::Ssfm(b) => b.forward(cx, x),
            AnyBlock::Sgfn(b) => b.forward(cx, x),
            AnyBlock::Daeb(b) => b.forward(cx, x),
        }
    }
}

fn small_block_config() -> BlockConfig {
    BlockConfig {
        msca_kernels: [3, 5, 7],
        strip_kernel: 5,
        ..BlockConfig::default()
    }
}

/// `sum(y * r)` for a fixed random `r`, so no output entry cancels another.
fn projected(g: &mut Graph<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let r = Tensor::create(y.shape(), Init::Uniform { lo: -1.0, hi: 1.0 }, Some(&mut SeededRng::substream(seed, 99)))?;
    let r = g.constant(r);
    let p = g.mul(y, &r)?;
    g.sum_all(&p)
}

/// Central-difference check of one block on a `[2, 8, 10, 10]` input in
/// 64-bit, BN in training mode.
pub fn block_grad_check(kind: BlockKind, seed: u64) -> Result<GradCheckReport> {
    let c = 8;
    let cfg = small_block_config();
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::<f64>::new();
    let s = &mut store;
    let r = &mut rng;
    let block = match kind {
        BlockKind::Msca => AnyBlock::Msca(Msca::new(s, "msca", c, &cfg, r)?),
        BlockKind::Samu => AnyBlock::Samu(Samu::new(s, "samu", c, r)?),
        BlockKind::Sru => AnyBlock::Sru(Sru::new(s, "sru", c, r)?),
        BlockKind::Dsmb => AnyBlock::Dsmb(Dsmb::new(s, "dsmb", c, c, &cfg, r)?),
        BlockKind::Ssfm => AnyBlock::Ssfm(Ssfm::new(s, "ssfm", c, &cfg, r)?),
        BlockKind::Sgfn => AnyBlock::Sgfn(Sgfn::new(s, "sgfn", c, cfg.strip_kernel, r)?),
        BlockKind::Daeb => AnyBlock::Daeb(Daeb::new(s, "daeb", c, &cfg, r)?),
    };
    randomize_all(&mut store, &mut rng);
    let x = Tensor::create(&[2, c, 10, 10], Init::Uniform { lo: -1.0, hi: 1.0 }, Some(&mut rng))?;
    let opts = GradCheckOptions {
        tol: BLOCK_TOL,
        seed,
        ..GradCheckOptions::default()
    };
    grad_check(
        |g, x, store| {
            let mut cx = Ctx::new(std::mem::take(g), store, Mode::Train);
            let y = block.forward(&mut cx, x);
            *g = cx.finish().0;
            projected(g, &y?, seed)
        },
        &x,
        &mut store,
        &opts,
    )
}

/// Overwrites every parameter so no branch starts at zero: conv weights
/// `U(-b, b)` with `b = 1 / sqrt(fan_in)`, BN scales `U(0.5, 1.5)`, biases
/// `U(-0.1, 0.1)`.
fn randomize_all<T: Scalar>(store: &mut ParamStore<T>, rng: &mut SeededRng) {
    for p in store.params_mut() {
        let shape = p.value().shape().to_vec();
        let (lo, hi) = match shape.as_slice() {
            [_, a, b, c] => {
                let b = 1.0 / ((a * b * c) as f64).sqrt();
                (-b, b)
            }
            _ if p.name.ends_with(".weight") => (0.5, 1.5),
            _ => (-0.1, 0.1),
        };
        for v in p.value_mut().data_mut() {
            *v = rng.uniform_t(lo, hi);
        }
    }
}

fn tiny_model_config() -> UHDResConfig {
    UHDResConfig {
        initial_channels: 4,
        level_depths: [1, 1, 1],
        msca_kernels: [3, 5, 7],
        strip_kernel: 5,
        ..UHDResConfig::default()
    }
    .with_dtype(DType::F64)
}

/// Full-model check on `[1, 3, 16, 16]` in 64-bit with randomised weights
/// and training-mode BN. `default_width` selects the default channel plan
/// instead of a 4-channel miniature.
pub fn model_grad_check(seed: u64, default_width: bool) -> Result<GradCheckReport> {
    let cfg = if default_width {
        UHDResConfig::default().with_dtype(DType::F64)
    } else {
        tiny_model_config()
    };
    let mut model = UHDResModel::<f64>::build(&cfg, seed)?;
    let mut rng = SeededRng::substream(seed, 1);
    randomize_all(model.store_mut(), &mut rng);
    let x = Tensor::create(&[1, 3, 16, 16], Init::Uniform { lo: 0.0, hi: 1.0 }, Some(&mut rng))?;
    let opts = GradCheckOptions {
        tol: MODEL_TOL,
        seed,
        input_samples: 32,
        param_samples: if default_width { 1 } else { 2 },
        ..GradCheckOptions::default()
    };
    let skeleton = model.clone();
    let mut store = model.store().clone();
    grad_check(
        |g, x, store| {
            let mut cx = Ctx::new(std::mem::take(g), store, Mode::Train);
            let y = skeleton.forward(&mut cx, x);
            *g = cx.finish().0;
            projected(g, &y?, seed)
        },
        &x,
        &mut store,
        &opts,
    )
}

/// Largest `|ifft(fft(x)) - x|` over a random `h x w` image.
pub fn fft_round_trip_error<T: Scalar>(h: usize, w: usize, seed: u64) -> Result<f64> {
    let x = Tensor::<T>::create(&[1, 3, h, w], Init::Uniform { lo: 0.0, hi: 1.0 }, Some(&mut SeededRng::new(seed)))?;
    let back = ifft2_real(&fft2_real(&x)?)?;
    Ok(back.max_abs_diff(&x).as_f64())
}

/// `sum |Z|^2` over the full plane, rebuilt from the half plane.
pub fn spectral_energy<T: Scalar>(z: &ComplexSpectrum<T>) -> Result<f64> {
    let (_, _, _, wh) = z.re.dims4()?;
    let mut e = 0.0;
    for (i, (re, im)) in z.re.data().iter().zip(z.im.data()).enumerate() {
        let col = i % wh;
        let k = if fft::self_conjugate_column(col, z.width) { 1.0 } else { 2.0 };
        e += k * (re.as_f64().powi(2) + im.as_f64().powi(2));
    }
    Ok(e)
}

/// Relative Parseval error `|sum x^2 - sum |Z|^2 / (h w)| / sum x^2`.
pub fn parseval_error<T: Scalar>(h: usize, w: usize, seed: u64) -> Result<f64> {
    let x = Tensor::<T>::create(&[1, 3, h, w], Init::Uniform { lo: -1.0, hi: 1.0 }, Some(&mut SeededRng::new(seed)))?;
    let spatial: f64 = x.data().iter().map(|v| v.as_f64().powi(2)).sum();
    let spectral = spectral_energy(&fft2_real(&x)?)? / (h * w) as f64;
    Ok((spatial - spectral).abs() / spatial)
}

/// Largest entry difference after splitting a spectrum into amplitude and
/// phase and recombining.
pub fn polar_error<T: Scalar>(h: usize, w: usize, seed: u64) -> Result<f64> {
    let x = Tensor::<T>::create(&[1, 3, h, w], Init::Uniform { lo: 0.0, hi: 1.0 }, Some(&mut SeededRng::new(seed)))?;
    let z = fft2_real(&x)?;
    let (back, _) = polar_reconstruct(&AmplitudePhase::of(&z))?;
    Ok(back.re.max_abs_diff(&z.re).as_f64().max(back.im.max_abs_diff(&z.im).as_f64()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<28} {}", self.name, self.detail)
    }
}

fn outcome(name: impl Into<String>, r: Result<(bool, String)>) -> CheckOutcome {
    let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
    }
}

fn bound(value: f64, limit: f64) -> (bool, String) {
    (value < limit, format!("{value:.3e} (limit {limit:.0e})"))
}

fn sgfn_sharing() -> Result<(bool, String)> {
    let mut store = ParamStore::<f32>::new();
    let c = 12;
    Sgfn::new(&mut store, "sgfn", c, 11, &mut SeededRng::new(0))?;
    let branch_sets = store.params().iter().filter(|p| p.name.ends_with("branch.pwc.weight")).count();
    let q = c / 2;
    let shared = (c * 2 * c + 2 * c) + (c * c + c) + 2 * (q * 11 + q) + (q * q + q) + (c * c + c);
    Ok((
        branch_sets == 1 && store.count() == shared,
        format!("{branch_sets} branch weight set(s), {} params", store.count()),
    ))
}

fn fresh_model_identity() -> Result<(bool, String)> {
    let model = UHDResModel::<f64>::build(&tiny_model_config(), 3)?;
    let x = Tensor::create(&[1, 3, 13, 19], Init::Uniform { lo: 0.0, hi: 1.0 }, Some(&mut SeededRng::new(3)))?;
    let y = model.predict(&x)?;
    Ok((y == x, format!("max diff {:.3e}", y.max_abs_diff(&x))))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let model = UHDResModel::<f32>::build(&tiny_model_config().with_dtype(DType::F32), 5)?;
    let path = std::env::temp_dir().join(format!("uhdres-selftest-{}.ckpt", std::process::id()));
    model.save_checkpoint(&path)?;
    let loaded = UHDResModel::<f32>::load_checkpoint(&path, model.config());
    let _ = std::fs::remove_file(&path);
    let loaded = loaded?;
    let x = Tensor::create(&[1, 3, 16, 16], Init::Uniform { lo: 0.0, hi: 1.0 }, Some(&mut SeededRng::new(5)))?;
    let same = model.predict(&x)? == loaded.predict(&x)?;
    Ok((same, if same { "bitwise equal".into() } else { "outputs differ".into() }))
}

/// Runs every suite; grad checks use seed 0 and the miniature model.
pub fn run_selftest() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for kind in ALL_BLOCKS {
        out.push(outcome(
            format!("grad {kind}"),
            block_grad_check(kind, 0).map(|r| (r.passed(), format!("{:.3e} at {}", r.max_rel_error, r.worst))),
        ));
    }
    out.push(outcome(
        "grad model",
        model_grad_check(0, false).map(|r| (r.passed(), format!("{:.3e} at {}", r.max_rel_error, r.worst))),
    ));
    for (h, w) in [(16, 16), (17, 23), (64, 48)] {
        out.push(outcome(format!("fft round trip f64 {h}x{w}"), fft_round_trip_error::<f64>(h, w, 1).map(|e| bound(e, 1e-10))));
        out.push(outcome(format!("fft round trip f32 {h}x{w}"), fft_round_trip_error::<f32>(h, w, 1).map(|e| bound(e, 1e-5))));
    }
    out.push(outcome("parseval 31x20", parseval_error::<f64>(31, 20, 2).map(|e| bound(e, 1e-4))));
    out.push(outcome("polar reconstruction 24x17", polar_error::<f64>(24, 17, 2).map(|e| bound(e, 1e-5))));
    out.push(outcome("sgfn weight sharing", sgfn_sharing()));
    out.push(outcome("fresh model is identity", fresh_model_identity()));
    out.push(outcome("checkpoint round trip", checkpoint_round_trip()));
    out
}

