//! Central finite-difference gradient checks (64-bit only).

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Largest allowed relative error.
    pub tol: f64,
    /// Denominator floor, so near-zero gradients are judged absolutely.
    pub floor: f64,
    /// Input entries probed; all of them when the input is smaller.
    pub input_samples: usize,
    /// Entries probed per parameter tensor.
    pub param_samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            input_samples: 64,
            param_samples: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Location of the worst entry, e.g. `input[12]` or `sgfn.pwc_in.weight[3]`.
    pub worst: String,
    pub tol: f64,
    /// Probes whose interval straddled a kink and were re-measured at a
    /// tenth of the step.
    pub refined: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn pick(n: usize, k: usize, rng: &mut SeededRng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..k).map(|_| rng.below(n)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Checks the gradient of the scalar `f(graph, x, store)` with respect to
/// `x` and to sampled entries of every parameter in `store`.
fn note(report: &mut GradCheckReport, a: f64, n: f64, what: String, opts: &GradCheckOptions) {
    let e = relative_error(a, n, opts.floor);
    report.checked += 1;
    if e >= report.max_rel_error {
        report.max_rel_error = e;
        report.worst = what;
    }
}

/// Central difference of `at(d) = f(x + d)`. When it misses `analytic` and
/// the two one-sided slopes disagree, `[x - h, x + h]` contains a kink
/// (a max or abs switching branch), so the probe is repeated at `h / 10`.
/// A wrong gradient does not shrink with the step and is still reported.
fn numeric(at: &mut dyn FnMut(f64) -> Result<f64>, analytic: f64, opts: &GradCheckOptions, report: &mut GradCheckReport) -> Result<f64> {
    let mut h = opts.step;
    let (up, down) = (at(h)?, at(-h)?);
    let n = (up - down) / (2.0 * h);
    if relative_error(analytic, n, opts.floor) < opts.tol {
        return Ok(n);
    }
    let mid = at(0.0)?;
    let (fwd, bwd) = ((up - mid) / h, (mid - down) / h);
    if relative_error(fwd, bwd, opts.floor) < opts.tol {
        return Ok(n);
    }
    report.refined += 1;
    h /= 10.0;
    Ok((at(h)? - at(-h)?) / (2.0 * h))
}

pub fn grad_check<F>(mut f: F, x: &Tensor<f64>, store: &mut ParamStore<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &Var<f64>, &ParamStore<f64>) -> Result<Var<f64>>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let loss = f(&mut g, &xv, store)?;
    let grads = g.backward(&loss)?;
    let dx = grads.of(&xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut eval = |x: &Tensor<f64>, store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        Ok(f(&mut g, &xv, store)?.value().item())
    };
    let mut rng = SeededRng::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
        tol: opts.tol,
        refined: 0,
    };

    let mut probe = x.clone();
    for i in pick(x.numel(), opts.input_samples, &mut rng) {
        let orig = probe.data()[i];
        let mut at = |d: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + d;
            let v = eval(&probe, store);
            probe.data_mut()[i] = orig;
            v
        };
        let n = numeric(&mut at, dx.data()[i], opts, &mut report)?;
        note(&mut report, dx.data()[i], n, format!("input[{i}]"), opts);
    }

    for p in 0..store.len() {
        let id = ParamId(p);
        let numel = store.param(id).value().numel();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.param(id).value().shape()));
        for i in pick(numel, opts.param_samples, &mut rng) {
            let orig = store.param(id).value().data()[i];
            let mut at = |d: f64| -> Result<f64> {
                store.param_mut(id).value_mut().data_mut()[i] = orig + d;
                let v = eval(x, store);
                store.param_mut(id).value_mut().data_mut()[i] = orig;
                v
            };
            let n = numeric(&mut at, analytic.data()[i], opts, &mut report)?;
            let name = store.param(id).name.clone();
            note(&mut report, analytic.data()[i], n, format!("{name}[{i}]"), opts);
        }
    }
    Ok(report)
}
