mod common;

use common::{rand64, weighted_sum};
use uhdres_core::blocks::{BlockConfig, Daeb, Msca, Samu, Sgfn, Sru};
use uhdres_core::gradcheck::{grad_check, GradCheckOptions};
use uhdres_core::nn::{Ctx, Mode};
use uhdres_core::selftest::{block_grad_check, ALL_BLOCKS, BLOCK_TOL};
use uhdres_core::{Graph, ParamStore, SeededRng, Tensor, Var};

fn eval<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> Tensor<f64>
where
    F: FnOnce(&mut Ctx<'_, f64>, &Var<f64>) -> uhdres_core::Result<Var<f64>>,
{
    let mut cx = Ctx::new(Graph::no_grad(), store, Mode::Eval);
    let xv = cx.graph.constant(x.clone());
    f(&mut cx, &xv).unwrap().value().clone()
}

#[test]
fn msca_widens_and_passes_group_zero() {
    let mut store = ParamStore::<f64>::new();
    let cfg = BlockConfig::default();
    let m = Msca::new(&mut store, "m", 6, &cfg, &mut SeededRng::new(0)).unwrap();
    assert_eq!(m.out_channels(), 12);
    let g = 3;
    let dw: usize = cfg.msca_kernels.iter().map(|k| g * k * k + g).sum();
    assert_eq!(store.count(), 6 * 12 + 12 + dw);
    let x = rand64(&[2, 6, 9, 11], 1);
    let y = eval(&store, &x, |cx, xv| m.forward(cx, xv));
    assert_eq!(y.shape(), [2, 12, 9, 11]);
    let p = eval(&store, &x, |cx, xv| m.pwc.forward(cx, xv));
    assert_eq!(y.narrow_channels(0, 3).unwrap(), p.narrow_channels(0, 3).unwrap());
    assert!(Msca::new(&mut store, "odd", 3, &BlockConfig { expansion: 1, ..cfg }, &mut SeededRng::new(0)).is_err());
}

#[test]
fn samu_keeps_shape_and_vanishes_on_zero_input() {
    let mut store = ParamStore::<f64>::new();
    let s = Samu::new(&mut store, "s", 4, &mut SeededRng::new(2)).unwrap();
    for (h, w) in [(8, 8), (9, 7), (2, 2), (15, 6)] {
        let y = eval(&store, &rand64(&[1, 4, h, w], 3), |cx, xv| s.forward(cx, xv));
        assert_eq!(y.shape(), [1, 4, h, w]);
    }
    let y = eval(&store, &Tensor::zeros(&[1, 4, 8, 8]), |cx, xv| s.forward(cx, xv));
    assert!(y.data().iter().all(|&v| v == 0.0));
    let mut cx = Ctx::new(Graph::no_grad(), &store, Mode::Eval);
    let one = cx.graph.constant(rand64(&[1, 4, 1, 5], 0));
    assert!(s.forward(&mut cx, &one).is_err());
}

#[test]
fn samu_gradients_on_small_input() {
    let mut store = ParamStore::<f64>::new();
    let s = Samu::new(&mut store, "s", 4, &mut SeededRng::new(4)).unwrap();
    let x = rand64(&[1, 4, 8, 8], 5);
    let opts = GradCheckOptions {
        tol: BLOCK_TOL,
        input_samples: 256,
        param_samples: 8,
        ..GradCheckOptions::default()
    };
    let report = grad_check(
        |g, x, store| {
            let mut cx = Ctx::new(std::mem::take(g), store, Mode::Train);
            let y = s.forward(&mut cx, x);
            *g = cx.finish().0;
            weighted_sum(g, &y?, 7)
        },
        &x,
        &mut store,
        &opts,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn sru_with_zero_fuse_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let s = Sru::new(&mut store, "s", 6, &mut SeededRng::new(0)).unwrap();
    s.fuse.zero(&mut store);
    let x = rand64(&[2, 6, 7, 9], 8);
    assert_eq!(eval(&store, &x, |cx, xv| s.forward(cx, xv)), x);
    assert!(Sru::new(&mut store, "odd", 5, &mut SeededRng::new(0)).is_err());
}

#[test]
fn sgfn_is_one_shared_branch_applied_twice() {
    let c = 8;
    let mut store = ParamStore::<f64>::new();
    let s = Sgfn::new(&mut store, "f", c, 5, &mut SeededRng::new(1)).unwrap();
    let x = rand64(&[1, c, 6, 6], 2);
    let y = eval(&store, &x, |cx, xv| s.forward(cx, xv));
    let manual = eval(&store, &x, |cx, xv| {
        let z = s.pwc_in.forward(cx, xv)?;
        let zs = cx.graph.split_channels(&z, 2)?;
        let a = s.gate(cx, &zs[0])?;
        let b = s.gate(cx, &zs[1])?;
        let cat = cx.graph.concat_channels(&[&a, &b])?;
        s.pwc_out.forward(cx, &cat)
    });
    assert_eq!(y, manual);

    // swapping the two halves of pwc_in and the matching columns of pwc_out
    // leaves the output unchanged only because both halves share one branch
    let swap_rows = |t: &Tensor<f64>, rows: usize| {
        let per = t.numel() / rows;
        let half = rows / 2;
        let mut d = t.data().to_vec();
        for r in 0..rows {
            let src = (r + half) % rows;
            d[r * per..(r + 1) * per].copy_from_slice(&t.data()[src * per..(src + 1) * per]);
        }
        Tensor::from_vec(t.shape(), d).unwrap()
    };
    let mut swapped = store.clone();
    let win = store.param(s.pwc_in.weight).value().clone();
    let bin = store.param(s.pwc_in.bias.unwrap()).value().clone();
    swapped.assign("f.pwc_in.weight", swap_rows(&win, 2 * c)).unwrap();
    swapped.assign("f.pwc_in.bias", swap_rows(&bin, 2 * c)).unwrap();
    let wout = store.param(s.pwc_out.weight).value();
    let mut d = wout.data().to_vec();
    for o in 0..c {
        for i in 0..c {
            d[o * c + i] = wout.data()[o * c + (i + c / 2) % c];
        }
    }
    swapped.assign("f.pwc_out.weight", Tensor::from_vec(wout.shape(), d).unwrap()).unwrap();
    let y2 = eval(&swapped, &x, |cx, xv| s.forward(cx, xv));
    assert!(y2.max_abs_diff(&y) < 1e-12);

    // one mutation of the shared branch moves both halves
    let mut mutated = store.clone();
    let w = mutated.param(s.branch.out.weight).value().map(|v| v * 1.5);
    mutated.assign("f.branch.out.weight", w).unwrap();
    let (a, b) = {
        let mut cx = Ctx::new(Graph::no_grad(), &store, Mode::Eval);
        let xv = cx.graph.constant(rand64(&[1, c, 4, 4], 3));
        let g1 = s.gate(&mut cx, &xv).unwrap().value().clone();
        let mut cx = Ctx::new(Graph::no_grad(), &mutated, Mode::Eval);
        let xv = cx.graph.constant(rand64(&[1, c, 4, 4], 3));
        (g1, s.gate(&mut cx, &xv).unwrap().value().clone())
    };
    assert!(a.max_abs_diff(&b) > 1e-6);
    let ym = eval(&mutated, &x, |cx, xv| s.forward(cx, xv));
    let z = eval(&store, &x, |cx, xv| s.pwc_in.forward(cx, xv));
    let zm = eval(&mutated, &x, |cx, xv| s.pwc_in.forward(cx, xv));
    assert_eq!(z, zm);
    assert!(ym.max_abs_diff(&y) > 1e-6);
    assert!(Sgfn::new(&mut store, "odd", 5, 5, &mut SeededRng::new(0)).is_err());
}

#[test]
fn daeb_starts_as_identity() {
    let cfg = BlockConfig::default();
    let mut store = ParamStore::<f64>::new();
    let d = Daeb::new(&mut store, "d", 12, &cfg, &mut SeededRng::new(3)).unwrap();
    d.zero_branch_outputs(&mut store);
    let x = rand64(&[2, 12, 10, 12], 4);
    assert_eq!(eval(&store, &x, |cx, xv| d.forward(cx, xv)), x);
    let mut cx = Ctx::new(Graph::no_grad(), &store, Mode::Train);
    let xv = cx.graph.constant(x.clone());
    assert_eq!(d.forward(&mut cx, &xv).unwrap().value(), &x);
}

#[test]
fn daeb_ablations_shrink() {
    let full = {
        let mut s = ParamStore::<f64>::new();
        Daeb::new(&mut s, "d", 12, &BlockConfig::default(), &mut SeededRng::new(0)).unwrap();
        s.count()
    };
    let variants = [
        BlockConfig { use_msca: false, ..BlockConfig::default() },
        BlockConfig { use_samu: false, ..BlockConfig::default() },
        BlockConfig { use_sru: false, ..BlockConfig::default() },
        BlockConfig { use_sgfn: false, ..BlockConfig::default() },
    ];
    for cfg in variants {
        let mut s = ParamStore::<f64>::new();
        let d = Daeb::new(&mut s, "d", 12, &cfg, &mut SeededRng::new(0)).unwrap();
        assert!(s.count() < full, "{cfg:?}");
        let y = eval(&s, &rand64(&[1, 12, 9, 9], 1), |cx, xv| d.forward(cx, xv));
        assert_eq!(y.shape(), [1, 12, 9, 9]);
    }
}

#[test]
fn every_block_passes_gradient_check() {
    for kind in ALL_BLOCKS {
        let r = block_grad_check(kind, 0).unwrap();
        assert!(r.passed(), "{kind}: {r:?}");
    }
}
