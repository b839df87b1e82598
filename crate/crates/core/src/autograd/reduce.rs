use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Gradient goes to the first maximal element in row-major order.
    Max,
}

/// For each input element, the flat index of the output cell it reduces into.
fn reduce_map(shape: &[usize], dims: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(d, &e)| if dims.contains(&d) { 1 } else { e })
        .collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        let mut o = 0;
        for d in 0..shape.len() {
            o = o * out_shape[d] + if dims.contains(&d) { 0 } else { idx[d] };
        }
        map.push(o);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

impl<T: Scalar> Graph<T> {
    pub fn sum_all(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let shape = a.shape().to_vec();
        let out = Tensor::scalar(a.value().sum());
        self.record("sum", &[a], out, move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean_all(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let shape = a.shape().to_vec();
        let n = T::from_usize_lossy(a.value().numel());
        let out = Tensor::scalar(a.value().sum() / n);
        self.record("mean", &[a], out, move |g, _| vec![Some(Tensor::full(&shape, g.item() / n))])
    }

    /// Reduces over `dims`, keeping them as extent-1 axes.
    pub fn reduce(&mut self, op: ReduceOp, a: &Var<T>, dims: &[usize]) -> Result<Var<T>> {
        let shape = a.shape().to_vec();
        if let Some(&d) = dims.iter().find(|&&d| d >= shape.len()) {
            return Err(shape_err!("reduce dim {d} out of range for {shape:?}"));
        }
        let (out_shape, map) = reduce_map(&shape, dims);
        let n_out: usize = out_shape.iter().product();
        let count = T::from_usize_lossy(shape.iter().product::<usize>() / n_out);
        let data = a.value().data();
        let mut out = vec![T::zero(); n_out];
        let mut arg = vec![usize::MAX; n_out];
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for (i, &o) in map.iter().enumerate() {
                    out[o] = out[o] + data[i];
                }
                if op == ReduceOp::Mean {
                    out.iter_mut().for_each(|v| *v = *v / count);
                }
            }
            ReduceOp::Max => {
                for (i, &o) in map.iter().enumerate() {
                    if arg[o] == usize::MAX || data[i] > out[o] {
                        out[o] = data[i];
                        arg[o] = i;
                    }
                }
            }
        }
        let tag = match op {
            ReduceOp::Sum => "reduce_sum",
            ReduceOp::Mean => "reduce_mean",
            ReduceOp::Max => "reduce_max",
        };
        let out = Tensor::from_parts(out_shape, out);
        self.record(tag, &[a], out, move |g, _| {
            let gd = g.data();
            let grad = match op {
                ReduceOp::Sum => map.iter().map(|&o| gd[o]).collect(),
                ReduceOp::Mean => map.iter().map(|&o| gd[o] / count).collect(),
                ReduceOp::Max => {
                    let mut v = vec![T::zero(); map.len()];
                    for (o, &i) in arg.iter().enumerate() {
                        v[i] = gd[o];
                    }
                    v
                }
            };
            vec![Some(Tensor::from_parts(shape.clone(), grad))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(g: &mut Graph<f64>, shape: &[usize], d: Vec<f64>) -> Var<f64> {
        g.leaf(Tensor::from_vec(shape, d).unwrap())
    }

    #[test]
    fn mean_of_one_to_four() {
        let mut g = Graph::new();
        let x = v(&mut g, &[4], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.mean_all(&x).unwrap().value().item(), 2.5);
        assert_eq!(g.reduce(ReduceOp::Mean, &x, &[0]).unwrap().value().item(), 2.5);
    }

    #[test]
    fn max_tie_routes_to_lowest_index() {
        let mut g = Graph::new();
        let x = v(&mut g, &[3], vec![3.0, 1.0, 3.0]);
        let m = g.reduce(ReduceOp::Max, &x, &[0]).unwrap();
        let l = g.sum_all(&m).unwrap();
        let grads = g.backward(&l).unwrap();
        assert_eq!(grads.of(&x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_of_ones() {
        let mut g = Graph::new();
        let x = v(&mut g, &[2, 2], vec![1.0; 4]);
        let s = g.reduce(ReduceOp::Sum, &x, &[0, 1]).unwrap();
        assert_eq!(s.shape(), &[1, 1]);
        assert_eq!(s.value().item(), 4.0);
    }

    #[test]
    fn per_channel_mean_keeps_dims() {
        let mut g = Graph::new();
        let x = v(&mut g, &[1, 2, 1, 2], vec![1.0, 3.0, 10.0, 20.0]);
        let m = g.reduce(ReduceOp::Mean, &x, &[2, 3]).unwrap();
        assert_eq!(m.shape(), &[1, 2, 1, 1]);
        assert_eq!(m.value().data(), &[2.0, 15.0]);
    }
}
