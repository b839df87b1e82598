use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn permute_data<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for d in (0..rank - 1).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let data = t.data();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let from = a.shape().to_vec();
        let out = a.value().clone().reshaped(shape)?;
        self.record("reshape", &[a], out, move |g, _| {
            vec![Some(g.clone().reshaped(&from).expect("same numel"))]
        })
    }

    pub fn permute(&mut self, a: &Var<T>, perm: &[usize]) -> Result<Var<T>> {
        let rank = a.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("{perm:?} is not a permutation of rank {rank}"));
        }
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out = permute_data(a.value(), perm);
        self.record("permute", &[a], out, move |g, _| vec![Some(permute_data(g, &inverse))])
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?.shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} out of range for {first:?}"));
        }
        for p in parts {
            let s = p.shape();
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(shape_err!("concat: {s:?} does not match {first:?} off axis {axis}"));
            }
        }
        let (outer, inner) = outer_inner(&first, axis);
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                let chunk = e * inner;
                out.extend_from_slice(&p.value().data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let out = Tensor::from_parts(shape, out);
        self.record("concat", parts, out, move |g, need| {
            let gd = g.data();
            let mut offset = 0;
            extents
                .iter()
                .zip(need)
                .map(|(&e, &n)| {
                    let start = offset;
                    offset += e;
                    n.then(|| {
                        let mut v = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            v.extend_from_slice(&gd[base..base + e * inner]);
                        }
                        let mut s = first.clone();
                        s[axis] = e;
                        Tensor::from_parts(s, v)
                    })
                })
                .collect()
        })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let shape = a.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err!("narrow {start}+{len} on axis {axis} of {shape:?}"));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let e = shape[axis];
        let data = a.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * e + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, out);
        self.record("narrow", &[a], out, move |g, _| {
            let mut v = vec![T::zero(); outer * e * inner];
            let gd = g.data();
            for o in 0..outer {
                let base = (o * e + start) * inner;
                v[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), v))]
        })
    }

    /// Splits channels (axis 1) into `groups` equal parts.
    pub fn split_channels(&mut self, a: &Var<T>, groups: usize) -> Result<Vec<Var<T>>> {
        let c = *a.shape().get(1).ok_or_else(|| shape_err!("split needs a channel axis"))?;
        if groups == 0 || c % groups != 0 {
            return Err(shape_err!("cannot split {c} channels into {groups} equal groups"));
        }
        let each = c / groups;
        (0..groups).map(|k| self.narrow(a, 1, k * each, each)).collect()
    }

    pub fn concat_channels(&mut self, parts: &[&Var<T>]) -> Result<Var<T>> {
        self.concat(parts, 1)
    }
}
