//! Architectural units of the network: MSCA, SAMU, SRU, DSMB, SSFM, SGFN and
//! DAEB. Each holds parameter ids only; forward passes read values from the
//! [`Ctx`] they are given.

use crate::autograd::{PadMode, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm2d, ChannelAttention, Conv2d, Conv2dSpec, Ctx};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::Scalar;

/// Block-level switches and kernel sizes shared by every DAEB.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub expansion: usize,
    pub msca_kernels: [usize; 3],
    pub strip_kernel: usize,
    pub cam_reduction: usize,
    pub use_msca: bool,
    pub use_samu: bool,
    pub use_sru: bool,
    pub use_sgfn: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            expansion: 2,
            msca_kernels: [5, 9, 13],
            strip_kernel: 11,
            cam_reduction: 4,
            use_msca: true,
            use_samu: true,
            use_sru: true,
            use_sgfn: true,
        }
    }
}

fn channels<T: Scalar>(x: &Var<T>) -> Result<usize> {
    Ok(x.value().dims4()?.1)
}

/// Multi-scale context aggregator: PWC c -> rc, four equal groups, group 0
/// passed through, groups 1..3 depthwise with growing kernels, concat.
#[derive(Debug, Clone)]
pub struct Msca {
    pub channels: usize,
    pub pwc: Conv2d,
    pub dw: [Conv2d; 3],
}

impl Msca {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, cfg: &BlockConfig, rng: &mut SeededRng) -> Result<Self> {
        let rc = cfg.expansion * c;
        if rc % 4 != 0 {
            return Err(shape_err!("MSCA needs r*c divisible by 4, got {rc}"));
        }
        let g = rc / 4;
        let pwc = Conv2d::new(store, &format!("{name}.pwc"), Conv2dSpec::pointwise(c, rc), rng)?;
        let mut dw = Vec::with_capacity(3);
        for (i, &k) in cfg.msca_kernels.iter().enumerate() {
            dw.push(Conv2d::new(store, &format!("{name}.dw{}", i + 1), Conv2dSpec::depthwise(g, (k, k)), rng)?);
        }
        Ok(Self {
            channels: c,
            pwc,
            dw: dw.try_into().expect("three kernels"),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.pwc.spec.out_channels
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let c = channels(x)?;
        if c % 2 != 0 {
            return Err(shape_err!("MSCA needs an even channel count, got {c}"));
        }
        let y = self.pwc.forward(cx, x)?;
        let groups = cx.graph.split_channels(&y, 4)?;
        let mut outs = vec![groups[0].clone()];
        for (conv, g) in self.dw.iter().zip(&groups[1..]) {
            outs.push(conv.forward(cx, g)?);
        }
        let refs: Vec<&Var<T>> = outs.iter().collect();
        cx.graph.concat_channels(&refs)
    }
}

/// Spectral amplitude modulation unit: learns the amplitude of a pooled,
/// depthwise-filtered copy and keeps its phase as is.
#[derive(Debug, Clone)]
pub struct Samu {
    pub dw: Conv2d,
    pub amp1: Conv2d,
    pub amp2: Conv2d,
    pub pwc: Conv2d,
}

impl Samu {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            dw: Conv2d::new(store, &format!("{name}.dw"), Conv2dSpec::depthwise(c, (3, 3)), rng)?,
            amp1: Conv2d::new(store, &format!("{name}.amp1"), Conv2dSpec::pointwise(c, c), rng)?,
            amp2: Conv2d::new(store, &format!("{name}.amp2"), Conv2dSpec::pointwise(c, c), rng)?,
            pwc: Conv2d::new(store, &format!("{name}.pwc"), Conv2dSpec::pointwise(c, c), rng)?,
        })
    }

    /// Pooled depthwise features and the spectrum-modulated version of them,
    /// before the residual sum.
    pub fn spectral_branch<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let (_, _, h, w) = x.value().dims4()?;
        let pooled = cx.graph.adaptive_max_pool(x, h.div_ceil(2), w.div_ceil(2))?;
        let x_dw = self.dw.forward(cx, &pooled)?;
        let wp = x_dw.shape()[3];
        let z = cx.graph.rfft2(&x_dw)?;
        let amp = cx.graph.amplitude(&z)?;
        let phase = cx.graph.phase(&z)?;
        let a = self.amp1.forward(cx, &amp)?;
        let a = cx.graph.leaky_relu(&a, 0.1)?;
        let a = self.amp2.forward(cx, &a)?;
        let z2 = cx.graph.polar(&a, &phase)?;
        let spatial = cx.graph.irfft2(&z2, wp)?;
        Ok((x_dw, spatial))
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, _, h, w) = x.value().dims4()?;
        if h < 2 || w < 2 {
            return Err(shape_err!("SAMU needs at least 2x2, got {h}x{w}"));
        }
        let (x_dw, spatial) = self.spectral_branch(cx, x)?;
        let y = cx.graph.add(&spatial, &x_dw)?;
        let y = self.pwc.forward(cx, &y)?;
        let y = cx.graph.upsample_bilinear(&y, h, w)?;
        cx.graph.mul(&y, x)
    }
}

/// Structural refinement unit: max-pool and conv branches over the two
/// channel halves, fused by a 3x3 conv and added back.
#[derive(Debug, Clone)]
pub struct Sru {
    pub pwc: Conv2d,
    pub conv: Conv2d,
    pub fuse: Conv2d,
}

impl Sru {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut SeededRng) -> Result<Self> {
        if c % 2 != 0 {
            return Err(Error::Config(format!("SRU needs an even channel count, got {c}")));
        }
        let h = c / 2;
        Ok(Self {
            pwc: Conv2d::new(store, &format!("{name}.pwc"), Conv2dSpec::pointwise(h, h), rng)?,
            conv: Conv2d::new(store, &format!("{name}.conv"), Conv2dSpec::new(h, h, (3, 3)), rng)?,
            fuse: Conv2d::new(store, &format!("{name}.fuse"), Conv2dSpec::new(c, c, (3, 3)), rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let c = channels(x)?;
        if c % 2 != 0 {
            return Err(shape_err!("SRU needs an even channel count, got {c}"));
        }
        let halves = cx.graph.split_channels(x, 2)?;
        let p = cx.graph.pad2d(&halves[0], [1, 1, 1, 1], PadMode::Reflect)?;
        let p = cx.graph.max_pool2d(&p, 3, 1)?;
        let b1 = self.pwc.forward(cx, &p)?;
        let b2 = self.conv.forward(cx, &halves[1])?;
        let b2 = cx.graph.gelu(&b2)?;
        let y = cx.graph.concat_channels(&[&b1, &b2])?;
        let y = self.fuse.forward(cx, &y)?;
        cx.graph.add(&y, x)
    }
}

/// Decoupled spectral modulation block: low/high-frequency projections
/// through SAMU and SRU, fused, contracted and gated by channel attention.
#[derive(Debug, Clone)]
pub struct Dsmb {
    pub lf: Conv2d,
    pub hf: Conv2d,
    pub samu: Option<Samu>,
    pub sru: Option<Sru>,
    pub fuse: Conv2d,
    pub proj: Conv2d,
    pub dw: Conv2d,
    pub cam: ChannelAttention,
}

impl Dsmb {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        c: usize,
        cfg: &BlockConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            lf: Conv2d::new(store, &format!("{name}.lf"), Conv2dSpec::pointwise(in_c, c), rng)?,
            hf: Conv2d::new(store, &format!("{name}.hf"), Conv2dSpec::pointwise(in_c, c), rng)?,
            samu: cfg.use_samu.then(|| Samu::new(store, &format!("{name}.samu"), c, rng)).transpose()?,
            sru: cfg.use_sru.then(|| Sru::new(store, &format!("{name}.sru"), c, rng)).transpose()?,
            fuse: Conv2d::new(store, &format!("{name}.fuse"), Conv2dSpec::pointwise(c, c), rng)?,
            proj: Conv2d::new(store, &format!("{name}.proj"), Conv2dSpec::pointwise(c, c), rng)?,
            dw: Conv2d::new(store, &format!("{name}.dw"), Conv2dSpec::depthwise(c, (3, 3)), rng)?,
            cam: ChannelAttention::new(store, &format!("{name}.cam"), c, cfg.cam_reduction, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let x_lf = self.lf.forward(cx, x)?;
        let x_hf = self.hf.forward(cx, x)?;
        let lf = match &self.samu {
            Some(s) => s.forward(cx, &x_lf)?,
            None => x_lf,
        };
        let hf = match &self.sru {
            Some(s) => s.forward(cx, &x_hf)?,
            None => x_hf,
        };
        let y = cx.graph.add(&lf, &hf)?;
        let y = self.fuse.forward(cx, &y)?;
        let y = self.proj.forward(cx, &y)?;
        let y = self.dw.forward(cx, &y)?;
        self.cam.forward(cx, &y)
    }
}

/// Spatio-spectral fusion module: MSCA followed by DSMB.
#[derive(Debug, Clone)]
pub struct Ssfm {
    pub msca: Option<Msca>,
    pub dsmb: Dsmb,
}

impl Ssfm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, cfg: &BlockConfig, rng: &mut SeededRng) -> Result<Self> {
        let msca = cfg.use_msca.then(|| Msca::new(store, &format!("{name}.msca"), c, cfg, rng)).transpose()?;
        let mid = msca.as_ref().map_or(c, Msca::out_channels);
        let dsmb = Dsmb::new(store, &format!("{name}.dsmb"), mid, c, cfg, rng)?;
        Ok(Self { msca, dsmb })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        match &self.msca {
            Some(m) => {
                let y = m.forward(cx, x)?;
                self.dsmb.forward(cx, &y)
            }
            None => self.dsmb.forward(cx, x),
        }
    }
}

/// Branch weights of the SGFN; one instance serves both gated branches.
#[derive(Debug, Clone)]
pub struct SgfnBranch {
    pub pwc: Conv2d,
    pub strip_h: Conv2d,
    pub strip_v: Conv2d,
    pub out: Conv2d,
}

/// Shared gated feed-forward network.
#[derive(Debug, Clone)]
pub struct Sgfn {
    pub pwc_in: Conv2d,
    pub branch: SgfnBranch,
    pub pwc_out: Conv2d,
}

impl Sgfn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, strip: usize, rng: &mut SeededRng) -> Result<Self> {
        if c % 2 != 0 {
            return Err(Error::Config(format!("SGFN needs an even channel count, got {c}")));
        }
        let q = c / 2;
        let b = format!("{name}.branch");
        Ok(Self {
            pwc_in: Conv2d::new(store, &format!("{name}.pwc_in"), Conv2dSpec::pointwise(c, 2 * c), rng)?,
            branch: SgfnBranch {
                pwc: Conv2d::new(store, &format!("{b}.pwc"), Conv2dSpec::pointwise(c, c), rng)?,
                strip_h: Conv2d::new(store, &format!("{b}.strip_h"), Conv2dSpec::depthwise(q, (1, strip)), rng)?,
                strip_v: Conv2d::new(store, &format!("{b}.strip_v"), Conv2dSpec::depthwise(q, (strip, 1)), rng)?,
                out: Conv2d::new(store, &format!("{b}.out"), Conv2dSpec::pointwise(q, q), rng)?,
            },
            pwc_out: Conv2d::new(store, &format!("{name}.pwc_out"), Conv2dSpec::pointwise(c, c), rng)?,
        })
    }

    /// One gated branch: `out(V * strip_v(strip_h(Q)))` with `[Q, V] = pwc(z)`.
    pub fn gate<T: Scalar>(&self, cx: &mut Ctx<'_, T>, z: &Var<T>) -> Result<Var<T>> {
        let b = &self.branch;
        let t = b.pwc.forward(cx, z)?;
        let qv = cx.graph.split_channels(&t, 2)?;
        let q = b.strip_h.forward(cx, &qv[0])?;
        let q = b.strip_v.forward(cx, &q)?;
        let g = cx.graph.mul(&qv[1], &q)?;
        b.out.forward(cx, &g)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let z = self.pwc_in.forward(cx, x)?;
        let zs = cx.graph.split_channels(&z, 2)?;
        let z0 = self.gate(cx, &zs[0])?;
        let z1 = self.gate(cx, &zs[1])?;
        let y = cx.graph.concat_channels(&[&z0, &z1])?;
        self.pwc_out.forward(cx, &y)
    }
}

/// Dual-domain adaptive enhancement block:
/// `y = x + SSFM(BN(x))`, `out = y + SGFN(BN(y))`.
#[derive(Debug, Clone)]
pub struct Daeb {
    pub bn1: BatchNorm2d,
    pub ssfm: Ssfm,
    pub ffn: Option<(BatchNorm2d, Sgfn)>,
}

impl Daeb {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, cfg: &BlockConfig, rng: &mut SeededRng) -> Result<Self> {
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), c)?;
        let ssfm = Ssfm::new(store, &format!("{name}.ssfm"), c, cfg, rng)?;
        let ffn = if cfg.use_sgfn {
            let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), c)?;
            Some((bn2, Sgfn::new(store, &format!("{name}.sgfn"), c, cfg.strip_kernel, rng)?))
        } else {
            None
        };
        Ok(Self { bn1, ssfm, ffn })
    }

    /// Zeroes the last conv of both residual branches so the block starts
    /// as the identity.
    pub fn zero_branch_outputs<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.ssfm.dsmb.dw.zero(store);
        if let Some((_, sgfn)) = &self.ffn {
            sgfn.pwc_out.zero(store);
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let n = self.bn1.forward(cx, x)?;
        let s = self.ssfm.forward(cx, &n)?;
        let y = cx.graph.add(x, &s)?;
        match &self.ffn {
            Some((bn2, sgfn)) => {
                let n = bn2.forward(cx, &y)?;
                let f = sgfn.forward(cx, &n)?;
                cx.graph.add(&y, &f)
            }
            None => Ok(y),
        }
    }
}
