//! Latency and analytic peak-memory measurements of the eval-mode forward.
//!
//! Memory model: every op output in the forward trace is live from the op
//! that creates it until its last consumer (the final output stays live to
//! the end). The estimate is the peak of the live activation bytes plus the
//! bytes of every parameter and buffer. Kernel scratch space is ignored.

use std::time::Instant;

use crate::autograd::{Graph, TraceEntry};
use crate::error::{contract_err, Error, Result};
use crate::model::UHDResModel;
use crate::nn::Ctx;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Init, Tensor};

pub const BENCH_CSV_HEADER: &str = "h,w,scale,latency_s,peak_mem_bytes,params";
pub const DEFAULT_WARMUP: usize = 3;
pub const DEFAULT_REPEATS: usize = 7;
pub const THREADS_ENV: &str = "UHDRES_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub height: usize,
    pub width: usize,
    /// Pixel count relative to the first resolution of the run.
    pub scale: f64,
    pub latency_s: f64,
    pub peak_mem_bytes: usize,
    pub params: usize,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{},{}",
            self.height, self.width, self.scale, self.latency_s, self.peak_mem_bytes, self.params
        )
    }
}

pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(BENCH_CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Thread count from `UHDRES_THREADS`, else the number of logical CPUs.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("`{THREADS_ENV}` must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}

/// Peak live bytes over a trace, skipping parameter and buffer leaves.
pub fn peak_activation_bytes(trace: &[TraceEntry]) -> usize {
    let n = trace.len();
    let mut last_use: Vec<usize> = (0..n).collect();
    for (i, e) in trace.iter().enumerate() {
        for &p in &e.inputs {
            last_use[p] = last_use[p].max(i);
        }
    }
    if let Some(l) = last_use.last_mut() {
        *l = n;
    }
    let mut delta = vec![0isize; n + 2];
    for (i, e) in trace.iter().enumerate() {
        if matches!(e.tag, "param" | "frozen") {
            continue;
        }
        delta[i] += e.bytes as isize;
        delta[last_use[i] + 1] -= e.bytes as isize;
    }
    let mut live = 0isize;
    let mut peak = 0isize;
    for d in delta {
        live += d;
        peak = peak.max(live);
    }
    peak as usize
}

pub fn parameter_bytes<T: Scalar>(model: &UHDResModel<T>) -> usize {
    model.store().named_tensors().iter().map(|(_, t)| t.numel()).sum::<usize>() * T::DTYPE.size_of()
}

/// Analytic peak memory of one eval forward on `[1, 3, h, w]`.
pub fn estimate_peak_memory<T: Scalar>(model: &UHDResModel<T>, h: usize, w: usize) -> Result<usize> {
    let x = Tensor::<T>::zeros(&[1, 3, h, w]);
    let mut cx = Ctx::new(Graph::no_grad().with_trace(), model.store(), model.inference_mode());
    let xv = cx.graph.constant(x);
    model.forward(&mut cx, &xv)?;
    let trace = cx.graph.take_trace().expect("trace enabled");
    Ok(peak_activation_bytes(&trace) + parameter_bytes(model))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median eval-forward latency after `warmup` discarded runs, for each
/// `(h, w)`. Inputs are uniform noise from a fixed seed.
pub fn bench_forward<T: Scalar>(
    model: &UHDResModel<T>,
    resolutions: &[(usize, usize)],
    warmup: usize,
    repeats: usize,
) -> Result<Vec<BenchRecord>> {
    let &(h0, w0) = resolutions.first().ok_or_else(|| contract_err!("bench needs at least one resolution"))?;
    if let Some(&(h, w)) = resolutions.iter().find(|&&(h, w)| h < 8 || w < 8) {
        return Err(contract_err!("bench resolution {h}x{w} is below 8x8"));
    }
    if repeats == 0 {
        return Err(contract_err!("bench repeats must be positive"));
    }
    let mut rng = SeededRng::new(0);
    let mut out = Vec::with_capacity(resolutions.len());
    for &(h, w) in resolutions {
        let x = Tensor::<T>::create(&[1, 3, h, w], Init::Uniform { lo: 0.0, hi: 1.0 }, Some(&mut rng))?;
        for _ in 0..warmup {
            model.predict(&x)?;
        }
        let times = (0..repeats)
            .map(|_| {
                let t = Instant::now();
                model.predict(&x).map(|_| t.elapsed().as_secs_f64().max(f64::MIN_POSITIVE))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(BenchRecord {
            height: h,
            width: w,
            scale: (h * w) as f64 / (h0 * w0) as f64,
            latency_s: median(times),
            peak_mem_bytes: estimate_peak_memory(model, h, w)?,
            params: model.count_params(),
        });
    }
    Ok(out)
}
