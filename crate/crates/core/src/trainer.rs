//! AdamW with cosine-annealed learning rate and the training loop.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::autograd::Graph;
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{sample_patch_pair, Dataset};
use crate::error::{contract_err, Error, Result};
use crate::losses::{total_loss, LossReport};
use crate::metrics::{psnr, ssim};
use crate::model::UHDResModel;
use crate::nn::{Ctx, Mode};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const TRAIN_CSV_HEADER: &str = "step,lr,l_pixel,l_freq,l_total";
pub const EVAL_CSV_HEADER: &str = "step,psnr_db,ssim,non_finite";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn of(cfg: &TrainConfig) -> Self {
        Self {
            lr_max: cfg.lr_max,
            lr_min: cfg.lr_min,
            total_steps: cfg.total_steps,
        }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        lr_at(self, step)
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2`, exact at both ends.
pub fn lr_at(s: &CosineSchedule, step: usize) -> Result<f64> {
    if step > s.total_steps {
        return Err(contract_err!("step {step} is past the schedule end {}", s.total_steps));
    }
    if step == 0 {
        return Ok(s.lr_max);
    }
    if step == s.total_steps {
        return Ok(s.lr_min);
    }
    let t = std::f64::consts::PI * step as f64 / s.total_steps as f64;
    Ok(s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + t.cos()))
}

/// Moments for every parameter of one store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value().shape())).collect();
        Self {
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradients held in `store`, which are then zeroed.
    /// Decay only touches parameters flagged for it. A non-finite gradient
    /// aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some(p) = store.params().iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGrad(p.name.clone()));
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powf(self.step as f64);
        let bc2 = 1.0 - BETA2.powf(self.step as f64);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let (value, grad) = p.split_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (th, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g.as_f64();
                let mj = BETA1 * m[j].as_f64() + (1.0 - BETA1) * g;
                let vj = BETA2 * v[j].as_f64() + (1.0 - BETA2) * g * g;
                m[j] = T::lit(mj);
                v[j] = T::lit(vj);
                let t = th.as_f64();
                let upd = (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS) + wd * t;
                *th = T::lit(t - lr * upd);
            }
        }
        store.zero_grads();
        Ok(())
    }

    /// `opt.m.<param>`, `opt.v.<param>` and `opt.step`.
    pub fn state_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (i, p) in store.params().iter().enumerate() {
            out.push((format!("opt.m.{}", p.name), self.m[i].clone()));
            out.push((format!("opt.v.{}", p.name), self.v[i].clone()));
        }
        out.push(("opt.step".into(), Tensor::from_vec(&[1], vec![T::lit(self.step as f64)]).expect("one element")));
        out
    }

    pub fn load_state(&mut self, store: &ParamStore<T>, mut entries: BTreeMap<String, Tensor<T>>) -> Result<()> {
        let mut take = |key: String, shape: &[usize]| -> Result<Tensor<T>> {
            let t = entries.remove(&key).ok_or_else(|| Error::MissingKey(key.clone()))?;
            if t.shape() != shape {
                return Err(Error::KeyShape {
                    key,
                    found: t.shape().to_vec(),
                    expected: shape.to_vec(),
                });
            }
            Ok(t)
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in store.params() {
            m.push(take(format!("opt.m.{}", p.name), p.value().shape())?);
            v.push(take(format!("opt.v.{}", p.name), p.value().shape())?);
        }
        let step = take("opt.step".into(), &[1])?.item().as_f64();
        if let Some(k) = entries.keys().next() {
            return Err(Error::UnknownKey(k.clone()));
        }
        self.m = m;
        self.v = v;
        self.step = step as u64;
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let sq: f64 = store
        .params()
        .iter()
        .flat_map(|p| p.grad.data())
        .map(|g| g.as_f64() * g.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = T::lit(max_norm / norm);
        for p in store.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * k);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub pixel: f64,
    pub freq: f64,
    pub total: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!("{},{:e},{:e},{:e},{:e}", self.step, self.lr, self.pixel, self.freq, self.total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub psnr_db: f64,
    pub ssim: f64,
    /// Images whose output was not finite; left out of both means, which
    /// are NaN when every image is.
    pub non_finite: usize,
}

/// Mean clamped-output PSNR and SSIM over every full image of `dataset`.
pub fn evaluate<T: Scalar>(model: &UHDResModel<T>, dataset: &Dataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(contract_err!("cannot evaluate on an empty dataset"));
    }
    let (mut p, mut s, mut bad) = (0.0, 0.0, 0);
    for sample in &dataset.samples {
        let out = match model.infer(&sample.lq.to_tensor()) {
            Err(Error::NonFinite { .. }) => {
                bad += 1;
                continue;
            }
            r => r?,
        };
        let gt = sample.gt.to_tensor();
        p += psnr(&out, &gt, 1.0)?;
        s += ssim(&out, &gt)?;
    }
    let n = (dataset.len() - bad) as f64;
    Ok(EvalReport {
        psnr_db: p / n,
        ssim: s / n,
        non_finite: bad,
    })
}

/// Model, optimizer and schedule for one run.
pub struct Trainer<T: Scalar> {
    pub model: UHDResModel<T>,
    pub opt: AdamW<T>,
    pub config: TrainConfig,
    schedule: CosineSchedule,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: UHDResModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(model.store(), config.weight_decay);
        Ok(Self {
            schedule: CosineSchedule::of(&config),
            model,
            opt,
            config,
            step: 0,
        })
    }

    /// Steps completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// The `(lq, gt)` batch of step `step`; depends only on the seed, the
    /// step and the dataset.
    pub fn batch(&self, dataset: &Dataset, step: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        if dataset.is_empty() {
            return Err(contract_err!("training needs a non-empty dataset"));
        }
        let mut rng = SeededRng::substream(self.config.seed, step as u64);
        let mut lq = Vec::with_capacity(self.config.batch_size);
        let mut gt = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let sample = &dataset.samples[rng.below(dataset.len())];
            let (l, g) = sample_patch_pair(sample, self.config.patch_size, &mut rng)?;
            lq.push(l);
            gt.push(g);
        }
        Ok((Tensor::stack_batch(&lq)?, Tensor::stack_batch(&gt)?))
    }

    /// Train-mode loss of the current weights on a batch, without updating.
    pub fn loss_on(&self, lq: &Tensor<T>, gt: &Tensor<T>) -> Result<LossReport> {
        let mut cx = Ctx::new(Graph::no_grad(), self.model.store(), Mode::Train);
        let x = cx.graph.constant(lq.clone());
        let y = self.model.forward(&mut cx, &x)?;
        let t = cx.graph.constant(gt.clone());
        Ok(total_loss(&mut cx.graph, &y, &t, self.config.lambda)?.1)
    }

    /// Forward, backward, clip and update for the next step. The logged
    /// losses are those of the weights before the update.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<StepLog> {
        let step = self.step;
        let lr = self.schedule.lr_at(step)?;
        let (lq, gt) = self.batch(dataset, step)?;
        let mut cx = Ctx::new(Graph::new().with_finite_checks(false), self.model.store(), Mode::Train);
        let x = cx.graph.constant(lq);
        let y = self.model.forward(&mut cx, &x)?;
        let t = cx.graph.constant(gt);
        let (loss, report) = total_loss(&mut cx.graph, &y, &t, self.config.lambda)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite { op: "total_loss" });
        }
        let (graph, bn) = cx.finish();
        let grads = graph.backward(&loss)?;
        let store = self.model.store_mut();
        grads.accumulate_into(store);
        if let Some(p) = store.params().iter().find(|p| !p.grad.all_finite()) {
            let name = p.name.clone();
            store.zero_grads();
            return Err(Error::NonFiniteGrad(name));
        }
        clip_grad_norm(store, self.config.clip_norm);
        self.opt.step(store, lr)?;
        bn.apply(store);
        self.step += 1;
        Ok(StepLog {
            step,
            lr,
            pixel: report.pixel,
            freq: report.freq,
            total: report.total,
        })
    }

    /// Writes `<stem>.ckpt` (weights and BN buffers) and `<stem>.opt`.
    pub fn save_state(&self, stem: &Path) -> Result<()> {
        self.model.save_checkpoint(&stem.with_extension("ckpt"))?;
        let state = self.opt.state_tensors(self.model.store());
        let refs: Vec<(&str, &Tensor<T>)> = state.iter().map(|(k, t)| (k.as_str(), t)).collect();
        checkpoint::write_file(&stem.with_extension("opt"), &refs)
    }

    /// Restores weights and optimizer state written by [`Trainer::save_state`].
    pub fn resume(&mut self, stem: &Path) -> Result<()> {
        self.model.load_weights(&stem.with_extension("ckpt"))?;
        let entries = checkpoint::read_file(&stem.with_extension("opt"))?;
        self.opt.load_state(self.model.store(), entries)?;
        let done = self.opt.steps_taken() as usize;
        if done > self.config.total_steps {
            return Err(contract_err!("checkpoint is at step {done}, past total_steps {}", self.config.total_steps));
        }
        self.step = done;
        Ok(())
    }

    /// Runs the remaining steps. With `out_dir`, appends to `train_log.csv`
    /// and `eval.csv` there and writes `checkpoints/step_NNNNNN.{ckpt,opt}`
    /// at the checkpoint cadence plus `final.ckpt`.
    pub fn run(&mut self, dataset: &Dataset, out_dir: Option<&Path>) -> Result<Vec<StepLog>> {
        if dataset.is_empty() {
            return Err(contract_err!("training needs a non-empty dataset"));
        }
        let mut logs = Vec::new();
        let mut sinks = out_dir.map(|d| Sinks::open(d, self.step == 0)).transpose()?;
        while self.step < self.config.total_steps {
            let row = self.train_step(dataset)?;
            logs.push(row);
            let done = self.step;
            if let Some(s) = sinks.as_mut() {
                s.line(Sink::Train, &row.csv_row())?;
                if done % self.config.eval_every == 0 || done == self.config.total_steps {
                    let e = evaluate(&self.model, dataset)?;
                    s.line(Sink::Eval, &format!("{done},{:.6},{:.6},{}", e.psnr_db, e.ssim, e.non_finite))?;
                }
                if done % self.config.checkpoint_every == 0 {
                    s.flush()?;
                    self.save_state(&s.dir.join("checkpoints").join(format!("step_{done:06}")))?;
                }
            }
        }
        if let Some(s) = sinks.as_mut() {
            s.flush()?;
            self.model.save_checkpoint(&s.dir.join("final.ckpt"))?;
        }
        Ok(logs)
    }
}

#[derive(Clone, Copy)]
enum Sink {
    Train,
    Eval,
}

struct Sinks {
    dir: PathBuf,
    train: BufWriter<File>,
    eval: BufWriter<File>,
}

fn open_csv(path: &Path, header: &str, fresh: bool) -> Result<BufWriter<File>> {
    let ctx = || format!("opening {}", path.display());
    let exists = path.exists();
    let file = if fresh {
        File::create(path)
    } else {
        File::options().append(true).create(true).open(path)
    }
    .map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    if fresh || !exists {
        writeln!(w, "{header}").map_err(|e| Error::io(ctx(), e))?;
    }
    Ok(w)
}

impl Sinks {
    fn open(dir: &Path, fresh: bool) -> Result<Self> {
        let ck = dir.join("checkpoints");
        std::fs::create_dir_all(&ck).map_err(|e| Error::io(format!("creating {}", ck.display()), e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            train: open_csv(&dir.join("train_log.csv"), TRAIN_CSV_HEADER, fresh)?,
            eval: open_csv(&dir.join("eval.csv"), EVAL_CSV_HEADER, fresh)?,
        })
    }

    fn line(&mut self, which: Sink, text: &str) -> Result<()> {
        let w = match which {
            Sink::Train => &mut self.train,
            Sink::Eval => &mut self.eval,
        };
        writeln!(w, "{text}").map_err(|e| Error::io("writing training logs", e))
    }

    fn flush(&mut self) -> Result<()> {
        self.train.flush().map_err(|e| Error::io("flushing train_log.csv", e))?;
        self.eval.flush().map_err(|e| Error::io("flushing eval.csv", e))
    }
}
