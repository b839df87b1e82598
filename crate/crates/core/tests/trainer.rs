use std::collections::BTreeMap;

use uhdres_core::data::{synthetic_dataset, Dataset, Degradation};
use uhdres_core::metrics::psnr;
use uhdres_core::trainer::{
    clip_grad_norm, evaluate, lr_at, AdamW, CosineSchedule, Trainer, ADAM_EPS, BETA1, BETA2, EVAL_CSV_HEADER,
    TRAIN_CSV_HEADER,
};
use uhdres_core::{DType, Error, ParamStore, Tensor, TrainConfig, UHDResConfig, UHDResModel};

fn tiny() -> UHDResConfig {
    UHDResConfig {
        initial_channels: 4,
        level_depths: [1, 1, 1],
        msca_kernels: [3, 5, 7],
        strip_kernel: 5,
        ..UHDResConfig::default().with_dtype(DType::F64)
    }
}

fn train_cfg(total: usize) -> TrainConfig {
    TrainConfig {
        patch_size: 16,
        batch_size: 2,
        total_steps: total,
        checkpoint_every: 3,
        eval_every: 2,
        ..TrainConfig::default()
    }
}

fn data() -> Dataset {
    synthetic_dataset(2, 24, 24, Degradation::LowLight { gamma: 2.5, read_noise: 0.01 }, 0).unwrap()
}

fn trainer(total: usize) -> Trainer<f64> {
    Trainer::new(UHDResModel::build(&tiny(), 0).unwrap(), train_cfg(total)).unwrap()
}

fn weights(t: &Trainer<f64>) -> Vec<(String, Tensor<f64>)> {
    t.model.store().named_tensors().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

#[test]
fn cosine_schedule_endpoints_and_midpoint() {
    let s = CosineSchedule { lr_max: 5e-4, lr_min: 1e-7, total_steps: 100 };
    assert_eq!(lr_at(&s, 0).unwrap(), 5e-4);
    assert_eq!(lr_at(&s, 100).unwrap(), 1e-7);
    assert!((lr_at(&s, 50).unwrap() - (5e-4 + 1e-7) / 2.0).abs() < 1e-15);
    let lrs: Vec<f64> = (0..=100).map(|k| s.lr_at(k).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!(matches!(lr_at(&s, 101), Err(Error::Contract(_))));
    let one = CosineSchedule { total_steps: 1, ..s };
    assert_eq!((one.lr_at(0).unwrap(), one.lr_at(1).unwrap()), (5e-4, 1e-7));
}

fn one_param_store(decay: bool) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.register("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), decay).unwrap();
    store
}

#[test]
fn adamw_matches_closed_form() {
    let (lr, wd) = (0.1, 0.01);
    let grads = [[0.5, -0.25], [0.2, 0.3]];
    for decay in [true, false] {
        let mut store = one_param_store(decay);
        let mut opt = AdamW::new(&store, wd);
        let mut theta = [1.0f64, -2.0];
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        for (t, g) in grads.iter().enumerate() {
            store.params_mut()[0].grad.data_mut().copy_from_slice(g);
            opt.step(&mut store, lr).unwrap();
            let t = (t + 1) as i32;
            for j in 0..2 {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let mh = m[j] / (1.0 - BETA1.powi(t));
                let vh = v[j] / (1.0 - BETA2.powi(t));
                let d = if decay { wd } else { 0.0 };
                theta[j] -= lr * (mh / (vh.sqrt() + ADAM_EPS) + d * theta[j]);
            }
            let got = store.params()[0].value().data();
            assert!((got[0] - theta[0]).abs() < 1e-15 && (got[1] - theta[1]).abs() < 1e-15);
            assert!(store.params()[0].grad.data().iter().all(|&g| g == 0.0));
        }
        assert_eq!(opt.steps_taken(), 2);
    }
    // first step moves each weight by about lr regardless of gradient scale
    let mut store = one_param_store(false);
    let mut opt = AdamW::new(&store, 0.0);
    store.params_mut()[0].grad.data_mut().copy_from_slice(&[1e-3, -40.0]);
    opt.step(&mut store, 0.1).unwrap();
    let w = store.params()[0].value().data();
    assert!((w[0] - 0.9).abs() < 1e-5 && (w[1] + 1.9).abs() < 1e-5);
}

#[test]
fn adamw_refuses_non_finite_gradients() {
    let mut store = one_param_store(true);
    let mut opt = AdamW::new(&store, 0.01);
    store.params_mut()[0].grad.data_mut()[1] = f64::NAN;
    assert!(matches!(opt.step(&mut store, 0.1), Err(Error::NonFiniteGrad(ref n)) if n == "w"));
    assert_eq!(store.params()[0].value().data(), &[1.0, -2.0]);
    assert_eq!(opt.steps_taken(), 0);
}

#[test]
fn adamw_state_validation() {
    let store = one_param_store(true);
    let mut opt = AdamW::new(&store, 0.0);
    let full: BTreeMap<String, Tensor<f64>> = opt.state_tensors(&store).into_iter().collect();
    assert_eq!(full.keys().collect::<Vec<_>>(), ["opt.m.w", "opt.step", "opt.v.w"]);
    opt.load_state(&store, full.clone()).unwrap();

    let mut missing = full.clone();
    missing.remove("opt.v.w");
    assert!(matches!(opt.load_state(&store, missing), Err(Error::MissingKey(_))));
    let mut extra = full.clone();
    extra.insert("opt.m.ghost".into(), Tensor::zeros(&[1]));
    assert!(matches!(opt.load_state(&store, extra), Err(Error::UnknownKey(_))));
    let mut wrong = full;
    wrong.insert("opt.m.w".into(), Tensor::zeros(&[3]));
    assert!(matches!(opt.load_state(&store, wrong), Err(Error::KeyShape { .. })));
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut store = ParamStore::<f64>::new();
    store.register("a", Tensor::zeros(&[2]), true).unwrap();
    store.register("b", Tensor::zeros(&[1]), true).unwrap();
    store.params_mut()[0].grad.data_mut().copy_from_slice(&[3.0, 0.0]);
    store.params_mut()[1].grad.data_mut()[0] = 4.0;
    assert_eq!(clip_grad_norm(&mut store, 10.0), 5.0);
    assert_eq!(store.params()[0].grad.data(), &[3.0, 0.0]);
    assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
    assert!((store.params()[0].grad.data()[0] - 0.6).abs() < 1e-15);
    assert!((store.params()[1].grad.data()[0] - 0.8).abs() < 1e-15);
}

#[test]
fn first_logged_loss_is_the_pre_update_loss() {
    let ds = data();
    let mut t = trainer(4);
    let (lq, gt) = t.batch(&ds, 0).unwrap();
    assert_eq!(lq.shape(), [2, 3, 16, 16]);
    let before = t.loss_on(&lq, &gt).unwrap();
    let log = t.train_step(&ds).unwrap();
    assert_eq!((log.step, log.pixel, log.freq, log.total), (0, before.pixel, before.freq, before.total));
    assert_eq!(log.lr, t.config.lr_max);
    // a fresh model is the identity, so the pixel loss is the input error
    let l1 = lq.zip_map(&gt, |a, b| (a - b).abs()).unwrap().mean();
    assert!((log.pixel - l1).abs() < 1e-12);
    assert_eq!(t.step(), 1);
    assert!(t.loss_on(&lq, &gt).unwrap().total != before.total);
}

#[test]
fn batches_depend_only_on_seed_and_step() {
    let ds = data();
    let t = trainer(4);
    assert_eq!(t.batch(&ds, 3).unwrap(), t.batch(&ds, 3).unwrap());
    assert_ne!(t.batch(&ds, 3).unwrap(), t.batch(&ds, 4).unwrap());
    let other = Trainer::new(UHDResModel::build(&tiny(), 0).unwrap(), TrainConfig { seed: 9, ..train_cfg(4) }).unwrap();
    assert_ne!(t.batch(&ds, 3).unwrap(), other.batch(&ds, 3).unwrap());
}

#[test]
fn training_is_deterministic() {
    let ds = data();
    let (mut a, mut b) = (trainer(6), trainer(6));
    let la = a.run(&ds, None).unwrap();
    let lb = b.run(&ds, None).unwrap();
    assert_eq!(la.len(), 6);
    assert_eq!(la, lb);
    assert_eq!(weights(&a), weights(&b));
    assert!(la.last().unwrap().total < la[0].total);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = data();
    let dir = tempfile::tempdir().unwrap();
    let mut full = trainer(6);
    let full_logs = full.run(&ds, None).unwrap();

    let mut first = Trainer::new(UHDResModel::<f64>::build(&tiny(), 0).unwrap(), train_cfg(6)).unwrap();
    let mut head = Vec::new();
    for _ in 0..3 {
        head.push(first.train_step(&ds).unwrap());
    }
    let stem = dir.path().join("step_000003");
    first.save_state(&stem).unwrap();
    drop(first);

    let mut second = Trainer::new(UHDResModel::<f64>::build(&tiny(), 77).unwrap(), train_cfg(6)).unwrap();
    second.resume(&stem).unwrap();
    assert_eq!(second.step(), 3);
    let tail = second.run(&ds, None).unwrap();
    head.extend(tail);
    assert_eq!(head, full_logs);
    assert_eq!(weights(&second), weights(&full));
    assert_eq!(second.opt, full.opt);
}

#[test]
fn run_writes_logs_and_checkpoints() {
    let ds = data();
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(4);
    t.run(&ds, Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], TRAIN_CSV_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,"));
    let eval = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let steps: Vec<&str> = eval.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert!(eval.starts_with(EVAL_CSV_HEADER));
    assert_eq!(steps, ["2", "4"]);
    let ck = dir.path().join("checkpoints");
    assert!(ck.join("step_000003.ckpt").exists() && ck.join("step_000003.opt").exists());
    assert!(!ck.join("step_000004.ckpt").exists());
    let final_model = UHDResModel::<f64>::load_checkpoint(&dir.path().join("final.ckpt"), &tiny()).unwrap();
    assert_eq!(final_model.store().named_tensors(), t.model.store().named_tensors());

    let mut resumed = trainer(4);
    resumed.resume(&ck.join("step_000003")).unwrap();
    resumed.run(&ds, Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.lines().last().unwrap().starts_with("3,"));
}

#[test]
fn resume_past_the_end_is_rejected() {
    let ds = data();
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(3);
    t.run(&ds, None).unwrap();
    let stem = dir.path().join("s");
    t.save_state(&stem).unwrap();
    let mut short = trainer(2);
    assert!(matches!(short.resume(&stem), Err(Error::Contract(_))));
    assert!(trainer(3).resume(&dir.path().join("absent")).is_err());
}

#[test]
fn empty_dataset_and_bad_config() {
    let empty = Dataset::default();
    assert!(matches!(trainer(2).run(&empty, None), Err(Error::Contract(_))));
    assert!(matches!(trainer(2).train_step(&empty), Err(Error::Contract(_))));
    assert!(evaluate(&UHDResModel::<f64>::build(&tiny(), 0).unwrap(), &empty).is_err());
    let bad = TrainConfig { batch_size: 0, ..train_cfg(2) };
    assert!(Trainer::new(UHDResModel::<f64>::build(&tiny(), 0).unwrap(), bad).is_err());
    let big = Trainer::new(UHDResModel::<f64>::build(&tiny(), 0).unwrap(), TrainConfig { patch_size: 64, ..train_cfg(2) }).unwrap();
    assert!(matches!(big.batch(&data(), 0), Err(Error::Contract(_))));
}

#[test]
fn non_finite_weights_abort_the_step() {
    let ds = data();
    let mut t = trainer(4);
    let id = t.model.store().params().iter().position(|p| p.name == "stem.weight").unwrap();
    t.model.store_mut().params_mut()[id].value_mut().data_mut()[0] = f64::NAN;
    let before = weights(&t);
    let err = t.train_step(&ds).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. } | Error::NonFiniteGrad(_)), "{err:?}");
    assert_eq!(t.step(), 0);
    assert_eq!(t.opt.steps_taken(), 0);
    let after = weights(&t);
    for ((_, a), (_, b)) in before.iter().zip(&after) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x == y || (x.is_nan() && y.is_nan())));
    }
    assert!(t.model.store().params().iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
}

#[test]
fn evaluation_of_a_fresh_model_scores_the_input() {
    let ds = data();
    let m = UHDResModel::<f64>::build(&tiny(), 0).unwrap();
    let r = evaluate(&m, &ds).unwrap();
    let expect = ds
        .samples
        .iter()
        .map(|s| psnr(&s.lq.to_tensor::<f64>(), &s.gt.to_tensor(), 1.0).unwrap())
        .sum::<f64>()
        / ds.len() as f64;
    assert!((r.psnr_db - expect).abs() < 1e-9);
    assert!(r.ssim < 1.0);
}

#[test]
fn evaluation_counts_non_finite_outputs() {
    let ds = data();
    let mut m = UHDResModel::<f64>::build(&tiny(), 0).unwrap();
    let shape = m.store().named_tensors().into_iter().find(|(n, _)| *n == "head.weight").unwrap().1.shape().to_vec();
    m.store_mut().assign("head.weight", Tensor::full(&shape, f64::NAN)).unwrap();
    let r = evaluate(&m, &ds).unwrap();
    assert_eq!(r.non_finite, ds.len());
    assert!(r.psnr_db.is_nan() && r.ssim.is_nan());
}
