//! Network and training hyperparameters, plus the flat `key = value` file
//! format both are read from.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::scalar::DType;

/// Statistics BN normalises with outside training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BnInference {
    /// Running mean and variance accumulated during training.
    #[default]
    Running,
    /// Statistics of the batch being restored; buffers are ignored.
    Batch,
}

impl fmt::Display for BnInference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Running => "running",
            Self::Batch => "batch",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UHDResConfig {
    pub initial_channels: usize,
    /// DAEB count for encoder/decoder level 1, level 2 and the bottleneck.
    pub level_depths: [usize; 3],
    pub expansion: usize,
    pub msca_kernels: [usize; 3],
    pub strip_kernel: usize,
    pub cam_reduction: usize,
    pub dtype: DType,
    pub use_msca: bool,
    pub use_samu: bool,
    pub use_sru: bool,
    pub use_sgfn: bool,
    pub bn_inference: BnInference,
}

impl Default for UHDResConfig {
    fn default() -> Self {
        Self {
            initial_channels: 12,
            level_depths: [2, 3, 4],
            expansion: 2,
            msca_kernels: [5, 9, 13],
            strip_kernel: 11,
            cam_reduction: 4,
            dtype: if cfg!(feature = "f64") { DType::F64 } else { DType::F32 },
            use_msca: true,
            use_samu: true,
            use_sru: true,
            use_sgfn: true,
            bn_inference: BnInference::Running,
        }
    }
}

impl UHDResConfig {
    pub fn level_channels(&self) -> [usize; 3] {
        let c = self.initial_channels;
        [c, 2 * c, 4 * c]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let c = self.initial_channels;
        if c == 0 || c % 2 != 0 {
            return bad(format!("initial_channels must be even and positive, got {c}"));
        }
        if self.level_depths.contains(&0) {
            return bad(format!("level_depths must be positive, got {:?}", self.level_depths));
        }
        if self.expansion == 0 || (self.expansion * c) % 4 != 0 {
            return bad(format!("expansion {} x {c} channels does not split into 4 groups", self.expansion));
        }
        if let Some(k) = self.msca_kernels.iter().chain([&self.strip_kernel]).find(|&&k| k % 2 == 0) {
            return bad(format!("kernel sizes must be odd, got {k}"));
        }
        for ch in self.level_channels() {
            if self.cam_reduction == 0 || ch % self.cam_reduction != 0 {
                return bad(format!("cam_reduction {} does not divide {ch} channels", self.cam_reduction));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub lambda: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            batch_size: 2,
            total_steps: 2000,
            seed: 0,
            lambda: 0.1,
            lr_max: 5e-4,
            lr_min: 1e-7,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            checkpoint_every: 500,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("patch_size", self.patch_size),
            ("batch_size", self.batch_size),
            ("total_steps", self.total_steps),
            ("checkpoint_every", self.checkpoint_every),
            ("eval_every", self.eval_every),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!("need 0 < lr_min <= lr_max, got {} / {}", self.lr_min, self.lr_max)));
        }
        if self.lambda < 0.0 || self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("`lambda`, `weight_decay` must be >= 0 and `clip_norm` > 0".into()));
        }
        Ok(())
    }
}

/// Everything a config file can set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: UHDResConfig,
    pub train: TrainConfig,
}

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true/false, got `{v}`"))),
    }
}

fn parse_triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| parse_num(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}`: expected three comma-separated values, got `{v}`")))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses `key = value` lines. `#` starts a comment; blank lines are
    /// ignored; unknown keys and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", no + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", no + 1)),
                other => other,
            })?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "initial_channels" => m.initial_channels = parse_num(key, v)?,
            "level_depths" => m.level_depths = parse_triple(key, v)?,
            "expansion" => m.expansion = parse_num(key, v)?,
            "msca_kernels" => m.msca_kernels = parse_triple(key, v)?,
            "strip_kernel" => m.strip_kernel = parse_num(key, v)?,
            "cam_reduction" => m.cam_reduction = parse_num(key, v)?,
            "dtype" => {
                m.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::Config(format!("`dtype`: expected f32 or f64, got `{v}`"))),
                }
            }
            "use_msca" => m.use_msca = parse_bool(key, v)?,
            "use_samu" => m.use_samu = parse_bool(key, v)?,
            "use_sru" => m.use_sru = parse_bool(key, v)?,
            "use_sgfn" => m.use_sgfn = parse_bool(key, v)?,
            "bn_inference" => {
                m.bn_inference = match v {
                    "running" => BnInference::Running,
                    "batch" => BnInference::Batch,
                    _ => return Err(Error::Config(format!("`bn_inference`: expected running or batch, got `{v}`"))),
                }
            }
            "patch_size" => t.patch_size = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "total_steps" => t.total_steps = parse_num(key, v)?,
            "seed" => t.seed = parse_num(key, v)?,
            "lambda" => t.lambda = parse_num(key, v)?,
            "lr_max" => t.lr_max = parse_num(key, v)?,
            "lr_min" => t.lr_min = parse_num(key, v)?,
            "weight_decay" => t.weight_decay = parse_num(key, v)?,
            "clip_norm" => t.clip_norm = parse_num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse_num(key, v)?,
            "eval_every" => t.eval_every = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Serialises every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let _ = writeln!(s, "initial_channels = {}", m.initial_channels);
        let _ = writeln!(s, "level_depths = {}", join(&m.level_depths));
        let _ = writeln!(s, "expansion = {}", m.expansion);
        let _ = writeln!(s, "msca_kernels = {}", join(&m.msca_kernels));
        let _ = writeln!(s, "strip_kernel = {}", m.strip_kernel);
        let _ = writeln!(s, "cam_reduction = {}", m.cam_reduction);
        let _ = writeln!(s, "dtype = {}", m.dtype);
        let _ = writeln!(s, "use_msca = {}", m.use_msca);
        let _ = writeln!(s, "use_samu = {}", m.use_samu);
        let _ = writeln!(s, "use_sru = {}", m.use_sru);
        let _ = writeln!(s, "use_sgfn = {}", m.use_sgfn);
        let _ = writeln!(s, "bn_inference = {}", m.bn_inference);
        let _ = writeln!(s, "patch_size = {}", t.patch_size);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "total_steps = {}", t.total_steps);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "lambda = {}", t.lambda);
        let _ = writeln!(s, "lr_max = {}", t.lr_max);
        let _ = writeln!(s, "lr_min = {}", t.lr_min);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "clip_norm = {}", t.clip_norm);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(s, "eval_every = {}", t.eval_every);
        s
    }
}
