//! End-to-end acceptance criteria A1-A8. Runs as a plain binary so every
//! criterion prints one line; pass criterion ids (`A3 A6`) to run a subset.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use uhdres_core::bench::{bench_forward, parameter_bytes, thread_count, with_threads};
use uhdres_core::data::{synthetic_dataset, synthetic_scene, Degradation};
use uhdres_core::metrics::psnr;
use uhdres_core::selftest::{block_grad_check, model_grad_check, ALL_BLOCKS, BLOCK_TOL, MODEL_TOL};
use uhdres_core::spectral::{
    fft2_real, ifft2_real, mean_psnr, perturbation_experiment, polar_reconstruct, AmplitudePhase, Component,
};
use uhdres_core::trainer::Trainer;
use uhdres_core::{DType, Model32, Scalar, SeededRng, Tensor, TrainConfig, UHDResConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn default32() -> UHDResConfig {
    UHDResConfig::default().with_dtype(DType::F32)
}

fn a1_params() -> Outcome {
    let count = |k: [usize; 3]| Model32::build(&UHDResConfig { msca_kernels: k, ..default32() }, 0).map(|m| m.count_params());
    let n = count([5, 9, 13]).map_err(|e| e.to_string())?;
    let (small, large) = (count([3, 7, 11]).map_err(|e| e.to_string())?, count([7, 13, 19]).map_err(|e| e.to_string())?);
    let dev = (n as f64 - 401_220.0) / 401_220.0;
    ensure(
        dev.abs() <= 0.15 && small < n && n < large,
        format!("total {n} ({:+.1}% vs 401,220); [3,7,11] {small} < default {n} < [7,13,19] {large}", 100.0 * dev),
    )
}

fn a2_gradients() -> Outcome {
    let mut worst_block = 0.0f64;
    let mut worst_model = 0.0f64;
    let mut failures = Vec::new();
    let mut refined = 0;
    for seed in 0..3 {
        for kind in ALL_BLOCKS {
            let r = block_grad_check(kind, seed).map_err(|e| e.to_string())?;
            worst_block = worst_block.max(r.max_rel_error);
            refined += r.refined;
            if !r.passed() {
                failures.push(format!("{kind} seed {seed}: {:.2e} at {}", r.max_rel_error, r.worst));
            }
        }
        let r = model_grad_check(seed, true).map_err(|e| e.to_string())?;
        worst_model = worst_model.max(r.max_rel_error);
        refined += r.refined;
        if !r.passed() {
            failures.push(format!("model seed {seed}: {:.2e} at {}", r.max_rel_error, r.worst));
        }
    }
    ensure(
        failures.is_empty(),
        format!(
            "7 blocks x 3 seeds max rel err {worst_block:.2e} (tol {BLOCK_TOL:e}); full model x 3 seeds {worst_model:.2e} (tol {MODEL_TOL:e}); {refined} kink probes refined{}",
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

fn a3_overfit() -> Outcome {
    let ds = synthetic_dataset(1, 64, 64, Degradation::LowLight { gamma: 3.0, read_noise: 0.01 }, 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::default();
    let model = Model32::build(&default32(), cfg.seed).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(model, cfg.clone()).map_err(|e| e.to_string())?;
    let (lq, gt) = (ds.samples[0].lq.to_tensor::<f32>(), ds.samples[0].gt.to_tensor::<f32>());
    let input_psnr = psnr(&lq, &gt, 1.0).map_err(|e| e.to_string())?;
    let mut last = (f64::INFINITY, 0.0);
    while t.step() < cfg.total_steps {
        t.train_step(&ds).map_err(|e| format!("step {}: {e}", t.step()))?;
        if t.step() % 25 == 0 || t.step() == cfg.total_steps {
            let out = t.model.infer(&lq).map_err(|e| e.to_string())?;
            let l1 = out.zip_map(&gt, |a, b| (a - b).abs()).map_err(|e| e.to_string())?.mean().as_f64();
            let p = psnr(&out, &gt, 1.0).map_err(|e| e.to_string())?;
            last = (l1, p);
            if l1 < 0.02 && p >= 30.0 {
                return Ok(format!(
                    "step {}: L1 {l1:.4}, PSNR {p:.2} dB (input {input_psnr:.2} dB), eval mode, clamped",
                    t.step()
                ));
            }
        }
    }
    Err(format!("after {} steps: L1 {:.4}, PSNR {:.2} dB", cfg.total_steps, last.0, last.1))
}

fn a4_phase_sensitivity() -> Outcome {
    let images: Vec<(String, Tensor<f64>)> = (0..5)
        .map(|i| {
            let img = synthetic_scene::<f64>(64, 64, &mut SeededRng::substream(2024, i))?;
            Ok((format!("scene_{i}"), img))
        })
        .collect::<uhdres_core::Result<_>>()
        .map_err(|e| e.to_string())?;
    let eps = [0.1, 0.2, 0.3];
    let rows = perturbation_experiment(&images, &eps, &[1, 2, 3]).map_err(|e| e.to_string())?;
    let mean = |c, e| mean_psnr(&rows, c, e).unwrap_or(f64::NAN);
    let amp: Vec<f64> = eps.iter().map(|&e| mean(Component::Amplitude, e)).collect();
    let pha: Vec<f64> = eps.iter().map(|&e| mean(Component::Phase, e)).collect();
    let below = pha.iter().zip(&amp).all(|(p, a)| p < a);
    let mono = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0]);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/");
    ensure(
        below && mono(&amp) && mono(&pha),
        format!("5 images x 3 seeds, eps 0.1/0.2/0.3: amplitude {} dB, phase {} dB", fmt(&amp), fmt(&pha)),
    )
}

fn half_plane_energy<T: Scalar>(re: &Tensor<T>, im: &Tensor<T>, h: usize, w: usize) -> f64 {
    let wh = w / 2 + 1;
    let mut e = 0.0;
    for (i, (r, m)) in re.data().iter().zip(im.data()).enumerate() {
        let kx = i % wh;
        let k = if kx == 0 || (w.is_multiple_of(2) && kx == w / 2) { 1.0 } else { 2.0 };
        e += k * (r.as_f64().powi(2) + m.as_f64().powi(2));
    }
    e / (h * w) as f64
}

fn a5_spectral() -> Outcome {
    let sizes = [(8, 8), (16, 16), (17, 23), (31, 64), (64, 48), (63, 63), (64, 64)];
    let (mut rt64, mut rt32, mut polar, mut parseval) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (i, &(h, w)) in sizes.iter().enumerate() {
        let mut rng = SeededRng::substream(5, i as u64);
        let x = Tensor::<f64>::create(&[1, 3, h, w], uhdres_core::Init::Uniform { lo: 0.0, hi: 1.0 }, Some(&mut rng))
            .map_err(|e| e.to_string())?;
        let z = fft2_real(&x).map_err(|e| e.to_string())?;
        rt64 = rt64.max(ifft2_real(&z).map_err(|e| e.to_string())?.max_abs_diff(&x));
        let x32 = x.cast::<f32>();
        let z32 = fft2_real(&x32).map_err(|e| e.to_string())?;
        rt32 = rt32.max(f64::from(ifft2_real(&z32).map_err(|e| e.to_string())?.max_abs_diff(&x32)));
        let (back, _) = polar_reconstruct(&AmplitudePhase::of(&z)).map_err(|e| e.to_string())?;
        polar = polar.max(back.re.max_abs_diff(&z.re)).max(back.im.max_abs_diff(&z.im));
        let spatial: f64 = x.data().iter().map(|v| v * v).sum();
        parseval = parseval.max((spatial - half_plane_energy(&z.re, &z.im, h, w)).abs() / spatial);
    }
    ensure(
        rt64 < 1e-10 && rt32 < 1e-5 && polar < 1e-5 && parseval < 1e-4,
        format!(
            "{} sizes up to 64x64: round trip f64 {rt64:.1e}, f32 {rt32:.1e}; polar {polar:.1e}; Parseval rel {parseval:.1e}",
            sizes.len()
        ),
    )
}

fn a6_scaling() -> Outcome {
    let model = Model32::build(&default32(), 0).map_err(|e| e.to_string())?;
    let threads = thread_count().map_err(|e| e.to_string())?;
    let sizes = [128usize, 256, 512];
    let res: Vec<(usize, usize)> = sizes.iter().map(|&s| (s, s)).collect();
    let recs = with_threads(threads, || bench_forward(&model, &res, 1, 3))
        .map_err(|e| e.to_string())?
        .map_err(|e| e.to_string())?;
    let t: Vec<f64> = recs.iter().map(|r| r.latency_s).collect();
    let params = parameter_bytes(&model);
    let act: Vec<f64> = recs.iter().map(|r| (r.peak_mem_bytes - params) as f64).collect();
    let ratios: Vec<f64> = act.windows(2).map(|w| w[1] / w[0]).collect();
    let monotone = t.windows(2).all(|w| w[1] > w[0]);
    let speed = t[2] / t[1];
    let mem_ok = ratios.iter().all(|r| (3.5..=4.5).contains(r));
    ensure(
        monotone && speed <= 5.0 && mem_ok,
        format!(
            "{threads} thread(s): latency {:.3}/{:.3}/{:.3} s, t512/t256 {speed:.2}; activation memory x{:.2}, x{:.2} per doubling",
            t[0], t[1], t[2], ratios[0], ratios[1]
        ),
    )
}

fn a7_ablations() -> Outcome {
    let full = Model32::build(&default32(), 0).map_err(|e| e.to_string())?.count_params();
    let x = Tensor::<f32>::full(&[1, 3, 40, 56], 0.5);
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, cfg) in [
        ("msca", UHDResConfig { use_msca: false, ..default32() }),
        ("samu", UHDResConfig { use_samu: false, ..default32() }),
        ("sru", UHDResConfig { use_sru: false, ..default32() }),
        ("sgfn", UHDResConfig { use_sgfn: false, ..default32() }),
    ] {
        let m = Model32::build(&cfg, 0).map_err(|e| format!("{name}: {e}"))?;
        let y = m.predict(&x).map_err(|e| format!("{name}: {e}"))?;
        let n = m.count_params();
        ok &= y.shape() == x.shape() && n < full;
        parts.push(format!("-{name} {n}"));
    }
    ensure(ok, format!("full {full}; {}", parts.join(", ")))
}

fn a8_determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("uhdres-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let result = a8_inner(&dir);
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn a8_inner(dir: &std::path::Path) -> Outcome {
    let threads = thread_count().map_err(|e| e.to_string())?;
    let ds = synthetic_dataset(2, 48, 48, Degradation::LowLight { gamma: 3.0, read_noise: 0.01 }, 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        patch_size: 32,
        total_steps: 50,
        ..TrainConfig::default()
    };
    let fresh = || Trainer::new(Model32::build(&default32(), cfg.seed)?, cfg.clone());
    let run = || -> uhdres_core::Result<_> {
        let mut t = fresh()?;
        let logs = t.run(&ds, None)?;
        Ok((logs, t))
    };
    let (la, ta) = with_threads(threads, run).map_err(|e| e.to_string())?.map_err(|e| e.to_string())?;
    let (lb, _) = with_threads(threads, run).map_err(|e| e.to_string())?.map_err(|e| e.to_string())?;
    let csv = |l: &[uhdres_core::trainer::StepLog]| l.iter().map(|r| r.csv_row()).collect::<Vec<_>>();
    let logs_equal = csv(&la) == csv(&lb) && la.len() == 50;

    let ckpt = dir.join("final.ckpt");
    ta.model.save_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let loaded = Model32::load_checkpoint(&ckpt, &default32()).map_err(|e| e.to_string())?;
    let probe = ds.samples[1].lq.to_tensor::<f32>();
    let ckpt_equal = loaded.predict(&probe).map_err(|e| e.to_string())? == ta.model.predict(&probe).map_err(|e| e.to_string())?;

    let k = 20;
    let resumed = with_threads(threads, || -> uhdres_core::Result<_> {
        let mut first = fresh()?;
        let mut logs = Vec::new();
        for _ in 0..k {
            logs.push(first.train_step(&ds)?);
        }
        let stem = dir.join(format!("step_{k:06}"));
        first.save_state(&stem)?;
        let mut second = Trainer::new(Model32::build(&default32(), cfg.seed + 1)?, cfg.clone())?;
        second.resume(&stem)?;
        logs.extend(second.run(&ds, None)?);
        Ok((logs, second))
    })
    .map_err(|e| e.to_string())?
    .map_err(|e| e.to_string())?;
    let resume_equal = csv(&resumed.0) == csv(&la) && resumed.1.model.store().named_tensors() == ta.model.store().named_tensors();
    ensure(
        logs_equal && ckpt_equal && resume_equal,
        format!(
            "{threads} thread(s), 50 steps: logs identical {logs_equal}; checkpoint outputs bitwise {ckpt_equal}; resume at step {k} identical {resume_equal}"
        ),
    )
}

type Criterion = (&'static str, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("A1", "parameter budget", Duration::from_secs(1), a1_params),
        ("A2", "gradient correctness", Duration::from_secs(300), a2_gradients),
        ("A3", "trainability", Duration::from_secs(900), a3_overfit),
        ("A4", "phase sensitivity", Duration::from_secs(60), a4_phase_sensitivity),
        ("A5", "spectral identities", Duration::from_secs(30), a5_spectral),
        ("A6", "efficiency scaling", Duration::from_secs(300), a6_scaling),
        ("A7", "ablation plumbing", Duration::from_secs(60), a7_ablations),
        ("A8", "determinism and persistence", Duration::from_secs(300), a8_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, budget, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|a| a.eq_ignore_ascii_case(id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) => (took <= budget, d),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{id} {} {name}: {detail} [{:.1}s, budget {}s]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
