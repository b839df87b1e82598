use std::sync::Arc;

use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Output shape when every extent pair is equal or one side is 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err!("cannot broadcast {a:?} with {b:?} (rank differs)"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

/// Row-major strides of `shape` read through `out`; broadcast axes get 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every output index with the matching offsets into `a` and `b`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < total {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank - 1 {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        for x in 0..inner {
            f(o + x, oa + x * ia, ob + x * ib);
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sums a gradient of broadcast shape down to `target`.
fn unbroadcast<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let st = broadcast_strides(target, g.shape());
    let zero = vec![0; target.len()];
    let mut acc = vec![T::zero(); target.iter().product()];
    let gd = g.data();
    for_each_broadcast(g.shape(), &st, &zero, |o, t, _| acc[t] = acc[t] + gd[o]);
    Tensor::from_parts(target.to_vec(), acc)
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, op: Binary, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let tag = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        let out_shape = broadcast_shape(&ash, &bsh)?;
        let (ad, bd) = (a.value().data(), b.value().data());
        let f = |x: T, y: T| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out = if ash == bsh {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(&ash, &out_shape);
            let sb = broadcast_strides(&bsh, &out_shape);
            let mut out = vec![T::zero(); out_shape.iter().product()];
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(ad[i], bd[j]));
            out
        };
        let out = Tensor::from_parts(out_shape.clone(), out);
        let (av, bv) = (Arc::clone(&a.value), Arc::clone(&b.value));
        self.record(tag, &[a, b], out, move |g, need| {
            let ga = need[0].then(|| match op {
                Binary::Add | Binary::Sub => unbroadcast(g, &ash),
                Binary::Mul => unbroadcast(&mul_broadcast(g, &bv), &ash),
            });
            let gb = need[1].then(|| match op {
                Binary::Add => unbroadcast(g, &bsh),
                Binary::Sub => unbroadcast(&g.map(|v| -v), &bsh),
                Binary::Mul => unbroadcast(&mul_broadcast(g, &av), &bsh),
            });
            vec![ga, gb]
        })
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: &Var<T>, k: f64) -> Result<Var<T>> {
        let k = T::lit(k);
        let out = a.value().scale(k);
        self.record("scale", &[a], out, move |g, _| vec![Some(g.scale(k))])
    }

    pub fn add_scalar(&mut self, a: &Var<T>, k: f64) -> Result<Var<T>> {
        let k = T::lit(k);
        let out = a.value().map(|v| v + k);
        self.record("add_scalar", &[a], out, move |g, _| vec![Some(g.clone())])
    }

    /// Elementwise op whose derivative depends only on the input value.
    fn unary(
        &mut self,
        tag: &'static str,
        a: &Var<T>,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Result<Var<T>> {
        let out = a.value().map(f);
        let av = Arc::clone(&a.value);
        self.record(tag, &[a], out, move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(av.data())
                .map(|(&gv, &x)| gv * df(x))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
        })
    }

    pub fn leaky_relu(&mut self, a: &Var<T>, slope: f64) -> Result<Var<T>> {
        let s = T::lit(slope);
        self.unary(
            "leaky_relu",
            a,
            move |x| if x >= T::zero() { x } else { s * x },
            move |x| if x >= T::zero() { T::one() } else { s },
        )
    }

    pub fn relu(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary(
            "relu",
            a,
            |x| x.max(T::zero()),
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("gelu", a, gelu, gelu_grad)
    }

    pub fn sigmoid(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("sigmoid", a, sigmoid, |x| {
            let s = sigmoid(x);
            s * (T::one() - s)
        })
    }

    /// Absolute value; the derivative at exactly 0 is taken as 0.
    pub fn abs(&mut self, a: &Var<T>) -> Result<Var<T>> {
        self.unary("abs", a, |x| x.abs(), |x| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }
}

fn mul_broadcast<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    if g.shape() == other.shape() {
        return g.zip_map(other, |x, y| x * y).expect("same shape");
    }
    let so = broadcast_strides(other.shape(), g.shape());
    let zero = vec![0; g.rank()];
    let (gd, od) = (g.data(), other.data());
    let mut out = vec![T::zero(); gd.len()];
    for_each_broadcast(g.shape(), &zero, &so, |o, _, j| out[o] = gd[o] * od[j]);
    Tensor::from_parts(g.shape().to_vec(), out)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    x * T::lit(0.5) * (T::one() + (x * T::FRAC_1_SQRT_2()).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::FRAC_1_SQRT_2()).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}
