//! The full restorer: stem, three-level encoder/decoder of DAEBs, head.
//!
//! Inputs are reflect-padded on the bottom/right edges to a multiple of 8,
//! run through the network and cropped back. The head predicts a residual
//! `R` and the output is `I_LQ + R`; clamping to `[0, 1]` only happens in
//! [`UHDResModel::infer`].

use std::fmt;
use std::path::Path;

use crate::autograd::{Graph, PadMode, Var};
use crate::blocks::{BlockConfig, Daeb};
use crate::checkpoint;
use crate::config::{BnInference, UHDResConfig};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{Conv2d, Conv2dSpec, Ctx, Mode};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

/// Spatial extents must be divisible by this after padding.
pub const PAD_MULTIPLE: usize = 8;

impl UHDResConfig {
    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            expansion: self.expansion,
            msca_kernels: self.msca_kernels,
            strip_kernel: self.strip_kernel,
            cam_reduction: self.cam_reduction,
            use_msca: self.use_msca,
            use_samu: self.use_samu,
            use_sru: self.use_sru,
            use_sgfn: self.use_sgfn,
        }
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }
}

#[derive(Debug, Clone)]
pub struct UHDResModel<T: Scalar> {
    config: UHDResConfig,
    store: ParamStore<T>,
    stem: Conv2d,
    enc1: Vec<Daeb>,
    down1: Conv2d,
    enc2: Vec<Daeb>,
    down2: Conv2d,
    bottleneck: Vec<Daeb>,
    up2: Conv2d,
    dec2: Vec<Daeb>,
    up1: Conv2d,
    dec1: Vec<Daeb>,
    head: Conv2d,
}

fn stage<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    depth: usize,
    c: usize,
    cfg: &BlockConfig,
    rng: &mut SeededRng,
) -> Result<Vec<Daeb>> {
    (0..depth).map(|i| Daeb::new(store, &format!("{name}.{i}"), c, cfg, rng)).collect()
}

fn run<T: Scalar>(blocks: &[Daeb], cx: &mut Ctx<'_, T>, mut x: Var<T>) -> Result<Var<T>> {
    for b in blocks {
        x = b.forward(cx, &x)?;
    }
    Ok(x)
}

impl<T: Scalar> UHDResModel<T> {
    /// Builds and initialises every parameter from `seed`. The head conv and
    /// the last conv of every residual branch start at zero, so a fresh model
    /// is the identity restorer.
    pub fn build(config: &UHDResConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "config asks for {} but the model is instantiated with {}",
                config.dtype,
                T::DTYPE
            )));
        }
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let cfg = config.block_config();
        let [c1, c2, c3] = config.level_channels();
        let [n0, n1, n2] = config.level_depths;
        let s = &mut store;
        let r = &mut rng;
        let stem = Conv2d::new(s, "stem", Conv2dSpec::new(3, c1, (3, 3)).padding(PadMode::Zeros), r)?;
        let enc1 = stage(s, "enc1", n0, c1, &cfg, r)?;
        let down1 = Conv2d::new(s, "down1", Conv2dSpec::new(c1, c2, (3, 3)).stride(2), r)?;
        let enc2 = stage(s, "enc2", n1, c2, &cfg, r)?;
        let down2 = Conv2d::new(s, "down2", Conv2dSpec::new(c2, c3, (3, 3)).stride(2), r)?;
        let bottleneck = stage(s, "bottleneck", n2, c3, &cfg, r)?;
        let up2 = Conv2d::new(s, "up2", Conv2dSpec::pointwise(c3, c2), r)?;
        let dec2 = stage(s, "dec2", n1, c2, &cfg, r)?;
        let up1 = Conv2d::new(s, "up1", Conv2dSpec::pointwise(c2, c1), r)?;
        let dec1 = stage(s, "dec1", n0, c1, &cfg, r)?;
        let head = Conv2d::new(s, "head", Conv2dSpec::new(c1, 3, (3, 3)).padding(PadMode::Zeros), r)?;
        for b in enc1.iter().chain(&enc2).chain(&bottleneck).chain(&dec2).chain(&dec1) {
            b.zero_branch_outputs(s);
        }
        head.zero(s);
        Ok(Self {
            config: config.clone(),
            store,
            stem,
            enc1,
            down1,
            enc2,
            down2,
            bottleneck,
            up2,
            dec2,
            up1,
            dec1,
            head,
        })
    }

    pub fn config(&self) -> &UHDResConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// `I_LQ + R` before clamping. `x` is `[n, 3, h, w]` with `h, w >= 8`.
    pub fn forward(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, c, h, w) = x.value().dims4()?;
        if c != 3 {
            return Err(shape_err!("model input needs 3 channels, got {c}"));
        }
        if h < PAD_MULTIPLE || w < PAD_MULTIPLE {
            return Err(contract_err!("model input must be at least 8x8, got {h}x{w}"));
        }
        let (hp, wp) = (h.next_multiple_of(PAD_MULTIPLE), w.next_multiple_of(PAD_MULTIPLE));
        let xp = if (hp, wp) == (h, w) {
            x.clone()
        } else {
            cx.graph.pad2d(x, [0, hp - h, 0, wp - w], PadMode::Reflect)?
        };

        let s = self.stem.forward(cx, &xp)?;
        let e1 = run(&self.enc1, cx, s)?;
        let d = self.down1.forward(cx, &e1)?;
        let e2 = run(&self.enc2, cx, d)?;
        let d = self.down2.forward(cx, &e2)?;
        let b = run(&self.bottleneck, cx, d)?;

        let u = cx.graph.upsample_bilinear(&b, hp / 2, wp / 2)?;
        let u = self.up2.forward(cx, &u)?;
        let u = cx.graph.add(&u, &e2)?;
        let d2 = run(&self.dec2, cx, u)?;
        let u = cx.graph.upsample_bilinear(&d2, hp, wp)?;
        let u = self.up1.forward(cx, &u)?;
        let u = cx.graph.add(&u, &e1)?;
        let d1 = run(&self.dec1, cx, u)?;

        let r = self.head.forward(cx, &d1)?;
        let y = cx.graph.add(&xp, &r)?;
        if (hp, wp) == (h, w) {
            return Ok(y);
        }
        let y = cx.graph.narrow(&y, 2, 0, h)?;
        cx.graph.narrow(&y, 3, 0, w)
    }

    /// Eval-mode forward without a tape, clamped to `[0, 1]`. A non-finite
    /// output is an error rather than being clamped.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.predict(x)?;
        if !y.all_finite() {
            return Err(Error::NonFinite { op: "infer" });
        }
        Ok(y.map(|v| v.max(T::zero()).min(T::one())))
    }

    pub fn set_bn_inference(&mut self, stats: BnInference) {
        self.config.bn_inference = stats;
    }

    /// BN mode used by [`Self::predict`], from `bn_inference`.
    pub fn inference_mode(&self) -> Mode {
        match self.config.bn_inference {
            BnInference::Running => Mode::Eval,
            BnInference::Batch => Mode::EvalBatchStats,
        }
    }

    /// Eval-mode forward without a tape, unclamped.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cx = Ctx::new(Graph::no_grad(), &self.store, self.inference_mode());
        let xv = cx.graph.constant(x.clone());
        Ok(self.forward(&mut cx, &xv)?.into_tensor())
    }

    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        ParamBreakdown::of(&self.store)
    }

    /// Writes every parameter and BN buffer.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.store.named_tensors())
    }

    /// Replaces all weights and buffers with the contents of `path`.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let entries = checkpoint::read_file(path)?;
        checkpoint::load_into(&mut self.store, entries)
    }

    /// Builds a model for `config` and loads `path` into it.
    pub fn load_checkpoint(path: &Path, config: &UHDResConfig) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        model.load_weights(path)?;
        Ok(model)
    }
}

/// Parameter totals grouped by network stage and by block kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBreakdown {
    pub by_stage: Vec<(String, usize)>,
    pub by_kind: Vec<(String, usize)>,
    pub total: usize,
}

fn kind_of(name: &str) -> &'static str {
    const KINDS: [(&str, &str); 6] = [
        (".msca.", "msca"),
        (".samu.", "samu"),
        (".sru.", "sru"),
        (".dsmb.", "dsmb (other)"),
        (".sgfn.", "sgfn"),
        (".bn", "batch norm"),
    ];
    KINDS
        .iter()
        .find(|(pat, _)| name.contains(pat))
        .map_or("transitions", |&(_, k)| k)
}

fn bump(rows: &mut Vec<(String, usize)>, key: &str, n: usize) {
    match rows.iter_mut().find(|(k, _)| k == key) {
        Some((_, v)) => *v += n,
        None => rows.push((key.to_string(), n)),
    }
}

impl ParamBreakdown {
    pub fn of<T: Scalar>(store: &ParamStore<T>) -> Self {
        let mut by_stage = Vec::new();
        let mut by_kind = Vec::new();
        for p in store.params() {
            let n = p.value().numel();
            bump(&mut by_stage, p.name.split('.').next().unwrap_or(""), n);
            bump(&mut by_kind, kind_of(&p.name), n);
        }
        Self {
            by_stage,
            by_kind,
            total: store.count(),
        }
    }
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16}{:>10}", "stage", "params")?;
        for (k, n) in &self.by_stage {
            writeln!(f, "{k:<16}{n:>10}")?;
        }
        writeln!(f)?;
        writeln!(f, "{:<16}{:>10}", "block kind", "params")?;
        for (k, n) in &self.by_kind {
            writeln!(f, "{k:<16}{n:>10}")?;
        }
        writeln!(f)?;
        write!(f, "{:<16}{:>10}", "total", self.total)
    }
}
