mod common;

use common::{check_op, rand64, t64};
use proptest::prelude::*;
use uhdres_core::autograd::{PadMode, ReduceOp};
use uhdres_core::{Error, Graph, Init, SeededRng, Tensor};

#[test]
fn create_fills_and_is_reproducible() {
    let z = Tensor::<f64>::create(&[2, 3], Init::Zeros, None).unwrap();
    assert_eq!(z.data(), &[0.0; 6]);
    let o = Tensor::<f32>::create(&[1], Init::Ones, None).unwrap();
    assert_eq!(o.data(), &[1.0]);
    let a = Tensor::<f64>::create(&[4], Init::Uniform { lo: 0.0, hi: 1.0 }, Some(&mut SeededRng::new(7))).unwrap();
    let b = Tensor::<f64>::create(&[4], Init::Uniform { lo: 0.0, hi: 1.0 }, Some(&mut SeededRng::new(7))).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(a.data().iter().all(|v| (0.0..1.0).contains(v)));
    assert!(matches!(Tensor::<f64>::create(&[2, 0], Init::Zeros, None), Err(Error::Shape(_))));
}

#[test]
fn rng_stream_is_pinned() {
    // ChaCha8 seeded through seed_from_u64; a change here breaks every stored seed
    let mut r = SeededRng::new(0);
    let first = r.next_u64();
    let mut again = SeededRng::new(0);
    assert_eq!(again.next_u64(), first);
    assert_eq!(first, 0xb585_f767_a79a_3b6c, "{first:#x}");
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[3], &[-1.0, 0.0, 2.0]));
    assert_eq!(g.leaky_relu(&x, 0.1).unwrap().value().data(), &[-0.1, 0.0, 2.0]);
    let z = g.constant(Tensor::zeros(&[3]));
    assert_eq!(g.add(&x, &z).unwrap().value(), x.value());
    let s = g.sigmoid(&z).unwrap();
    assert_eq!(s.value().data(), &[0.5; 3]);
}

#[test]
fn split_and_concat() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand64(&[1, 8, 3, 3], 1));
    let parts = g.split_channels(&x, 4).unwrap();
    assert_eq!(parts.len(), 4);
    assert!(parts.iter().all(|p| p.shape() == [1, 2, 3, 3]));
    let halves = g.split_channels(&x, 2).unwrap();
    let back = g.concat_channels(&[&halves[0], &halves[1]]).unwrap();
    assert_eq!(back.value(), x.value());
    let six = g.constant(rand64(&[1, 6, 2, 2], 2));
    assert!(matches!(g.split_channels(&six, 4), Err(Error::Shape(_))));
}

#[test]
fn reductions() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[4], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(g.mean_all(&x).unwrap().value().item(), 2.5);
    let ones = g.constant(Tensor::ones(&[2, 2]));
    assert_eq!(g.reduce(ReduceOp::Sum, &ones, &[0, 1]).unwrap().value().item(), 4.0);

    let mut g = Graph::<f64>::new();
    let m = g.leaf(t64(&[3], &[3.0, 1.0, 3.0]));
    let y = g.reduce(ReduceOp::Max, &m, &[0]).unwrap();
    let s = g.sum_all(&y).unwrap();
    let grads = g.backward(&s).unwrap();
    assert_eq!(grads.of(&m).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn backward_closed_forms() {
    let mut g = Graph::<f64>::new();
    let w = g.leaf(t64(&[3], &[0.5, -2.0, 1.0]));
    let x = g.constant(t64(&[3], &[4.0, 5.0, -6.0]));
    let p = g.mul(&w, &x).unwrap();
    let l = g.sum_all(&p).unwrap();
    let grads = g.backward(&l).unwrap();
    assert_eq!(grads.of(&w).unwrap().data(), &[4.0, 5.0, -6.0]);

    let mut g = Graph::<f64>::new();
    let w = g.leaf(t64(&[1], &[3.0]));
    let sq = g.mul(&w, &w).unwrap();
    let l = g.sum_all(&sq).unwrap();
    assert_eq!(g.backward(&l).unwrap().of(&w).unwrap().data(), &[6.0]);
}

#[test]
fn parents_precede_children() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(rand64(&[1, 4, 6, 6], 3));
    let a = g.gelu(&x).unwrap();
    let parts = g.split_channels(&a, 2).unwrap();
    let b = g.mul(&parts[0], &parts[1]).unwrap();
    let c = g.upsample_bilinear(&b, 9, 9).unwrap();
    let d = g.rfft2(&c).unwrap();
    let e = g.amplitude(&d).unwrap();
    g.mean_all(&e).unwrap();
    for k in 0..g.len() {
        assert!(g.parents(k).iter().all(|&p| p < k), "node {k}");
    }
}

#[test]
fn non_finite_results_are_reported() {
    let mut g = Graph::<f32>::new().with_finite_checks(true);
    let x = g.leaf(Tensor::full(&[2], 1e30f32));
    assert!(matches!(g.mul(&x, &x), Err(Error::NonFinite { .. })));
}

#[test]
fn shape_errors_do_not_panic() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(&a, &b), Err(Error::Shape(_))));
    assert!(g.reshape(&a, &[5]).is_err());
    assert!(g.permute(&a, &[0, 0]).is_err());
}

const SHAPES: [[usize; 4]; 3] = [[1, 2, 4, 4], [2, 3, 5, 3], [1, 4, 6, 7]];

fn assert_ops<F>(name: &str, f: F)
where
    F: Fn(&mut Graph<f64>, &uhdres_core::Var<f64>) -> uhdres_core::Result<uhdres_core::Var<f64>>,
{
    for (i, s) in SHAPES.iter().enumerate() {
        let x = rand64(s, 100 + i as u64);
        let r = check_op(&x, i as u64, &f);
        assert!(r.passed(), "{name} on {s:?}: {r:?}");
    }
}

#[test]
fn grad_elementwise() {
    assert_ops("add", |g, x| {
        let y = g.scale(x, 2.0)?;
        g.add(x, &y)
    });
    assert_ops("sub", |g, x| {
        let y = g.gelu(x)?;
        g.sub(x, &y)
    });
    assert_ops("mul", |g, x| g.mul(x, x));
    assert_ops("mul broadcast", |g, x| {
        let s = g.reduce(ReduceOp::Mean, x, &[2, 3])?;
        g.mul(x, &s)
    });
    assert_ops("add_scalar", |g, x| g.add_scalar(x, 0.3));
    assert_ops("leaky_relu", |g, x| g.leaky_relu(x, 0.1));
    assert_ops("gelu", |g, x| g.gelu(x));
    assert_ops("sigmoid", |g, x| g.sigmoid(x));
    assert_ops("abs", |g, x| g.abs(x));
}

#[test]
fn grad_shape_ops() {
    assert_ops("reshape", |g, x| {
        let n = x.value().numel();
        g.reshape(x, &[n])
    });
    assert_ops("permute", |g, x| g.permute(x, &[3, 1, 0, 2]));
    assert_ops("concat", |g, x| {
        let y = g.scale(x, -1.5)?;
        g.concat(&[x, &y], 2)
    });
    assert_ops("narrow", |g, x| g.narrow(x, 3, 1, 2));
    assert_ops("split", |g, x| {
        let p = g.split_channels(x, 1)?;
        g.mul(&p[0], &p[0])
    });
    assert_ops("pad reflect", |g, x| g.pad2d(x, [1, 2, 3, 0], PadMode::Reflect));
    assert_ops("pad zeros", |g, x| g.pad2d(x, [2, 0, 1, 1], PadMode::Zeros));
}

#[test]
fn grad_reductions() {
    assert_ops("sum", |g, x| g.sum_all(x));
    assert_ops("mean", |g, x| g.mean_all(x));
    assert_ops("reduce sum", |g, x| g.reduce(ReduceOp::Sum, x, &[0, 2]));
    assert_ops("reduce mean", |g, x| g.reduce(ReduceOp::Mean, x, &[1]));
    assert_ops("reduce max", |g, x| g.reduce(ReduceOp::Max, x, &[2, 3]));
}

#[test]
fn grad_conv_and_pool() {
    assert_ops("conv dense", |g, x| {
        let c = x.shape()[1];
        let w = g.leaf(rand64(&[3, c, 3, 3], 9));
        let b = g.leaf(rand64(&[3], 10));
        let p = g.pad2d(x, [1, 1, 1, 1], PadMode::Reflect)?;
        g.conv2d(&p, &w, Some(&b), 1, 1)
    });
    assert_ops("conv stride 2", |g, x| {
        let c = x.shape()[1];
        let w = g.leaf(rand64(&[2, c, 3, 3], 11));
        let p = g.pad2d(x, [1, 1, 1, 1], PadMode::Zeros)?;
        g.conv2d(&p, &w, None, 2, 1)
    });
    assert_ops("conv depthwise", |g, x| {
        let c = x.shape()[1];
        let w = g.leaf(rand64(&[c, 1, 3, 1], 12));
        let p = g.pad2d(x, [1, 1, 0, 0], PadMode::Reflect)?;
        g.conv2d(&p, &w, None, 1, c)
    });
    assert_ops("adaptive max pool", |g, x| {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        g.adaptive_max_pool(x, h.div_ceil(2), w.div_ceil(2))
    });
    assert_ops("max pool", |g, x| {
        let p = g.pad2d(x, [1, 1, 1, 1], PadMode::Reflect)?;
        g.max_pool2d(&p, 3, 1)
    });
    assert_ops("bilinear", |g, x| {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        g.upsample_bilinear(x, 2 * h + 1, 2 * w)
    });
}

#[test]
fn grad_spectral() {
    assert_ops("rfft2", |g, x| g.rfft2(x));
    assert_ops("irfft2", |g, x| {
        let w = x.shape()[3];
        let z = g.rfft2(x)?;
        let z = g.scale(&z, 0.7)?;
        g.irfft2(&z, w)
    });
    assert_ops("amplitude", |g, x| {
        let z = g.rfft2(x)?;
        g.amplitude(&z)
    });
    // phase jumps by 2pi across the negative real axis, so probe it through a smooth map
    assert_ops("phase", |g, x| {
        let w = x.shape()[3];
        let z = g.rfft2(x)?;
        let p = g.phase(&z)?;
        let ones = g.constant(Tensor::ones(p.shape()));
        let z2 = g.polar(&ones, &p)?;
        g.irfft2(&z2, w)
    });
    assert_ops("polar", |g, x| {
        let w = x.shape()[3];
        let z = g.rfft2(x)?;
        let a = g.amplitude(&z)?;
        let a = g.mul(&a, &a)?;
        let p = g.phase(&z)?;
        let z2 = g.polar(&a, &p)?;
        g.irfft2(&z2, w)
    });
}

#[test]
fn grad_batch_norm() {
    assert_ops("bn train", |g, x| {
        let c = x.shape()[1];
        let gamma = g.leaf(rand64(&[c], 20).map(|v| 1.0 + 0.5 * v));
        let beta = g.leaf(rand64(&[c], 21));
        Ok(g.batch_norm_train(x, &gamma, &beta, 1e-5)?.0)
    });
    assert_ops("bn eval", |g, x| {
        let c = x.shape()[1];
        let gamma = g.leaf(rand64(&[c], 22));
        let beta = g.leaf(rand64(&[c], 23));
        let mean = rand64(&[c], 24);
        let var = rand64(&[c], 25).map(|v| 1.0 + 0.5 * v);
        g.batch_norm_eval(x, &gamma, &beta, &mean, &var, 1e-5)
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn numel_matches_shape(dims in proptest::collection::vec(1usize..5, 1..5)) {
        let t = Tensor::<f32>::zeros(&dims);
        prop_assert_eq!(t.numel(), dims.iter().product::<usize>());
        prop_assert_eq!(t.data().len(), t.numel());
    }

    #[test]
    fn split_concat_round_trip(n in 1usize..3, half in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(rand64(&[n, 2 * half, h, w], seed));
        let parts = g.split_channels(&x, 2).unwrap();
        let back = g.concat_channels(&[&parts[0], &parts[1]]).unwrap();
        prop_assert_eq!(back.value(), x.value());
    }

    #[test]
    fn permute_inverse_round_trip(perm in Just([0usize, 1, 2, 3]).prop_shuffle(), seed in any::<u64>()) {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(rand64(&[2, 3, 4, 5], seed));
        let mut inv = [0usize; 4];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let y = g.permute(&x, &perm).unwrap();
        let back = g.permute(&y, &inv).unwrap();
        prop_assert_eq!(back.value(), x.value());
    }

    #[test]
    fn gradients_are_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let x0 = rand64(&[1, 2, 3, 4], seed);
        let grad = |ka: f64, kb: f64| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(x0.clone());
            let f = g.gelu(&x).unwrap();
            let f = g.sum_all(&f).unwrap();
            let h = g.mul(&x, &x).unwrap();
            let h = g.mean_all(&h).unwrap();
            let fa = g.scale(&f, ka).unwrap();
            let hb = g.scale(&h, kb).unwrap();
            let l = g.add(&fa, &hb).unwrap();
            g.backward(&l).unwrap().of(&x).unwrap().clone()
        };
        let combined = grad(a, b);
        let (gf, gh) = (grad(1.0, 0.0), grad(0.0, 1.0));
        for i in 0..combined.numel() {
            let expect = a * gf.data()[i] + b * gh.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() < 1e-12);
        }
    }
}
