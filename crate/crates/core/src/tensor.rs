//! Dense channel-first tensors.

use std::fmt;

use crate::error::{shape_err, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

/// How to fill a freshly created tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
    Normal { mu: f64, sigma: f64 },
}

/// N-dimensional row-major array. Layout for images and feature maps is
/// (batch, channel, height, width).
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(shape_err!("tensor needs at least one dimension"));
    }
    if let Some(d) = shape.iter().position(|&e| e == 0) {
        return Err(shape_err!("extent {d} of {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn create(shape: &[usize], init: Init, rng: Option<&mut SeededRng>) -> Result<Self> {
        let n = check_extents(shape)?;
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Constant(c) => vec![T::lit(c); n],
            Init::Uniform { lo, hi } => {
                let rng = rng.ok_or_else(|| shape_err!("uniform init needs an rng"))?;
                (0..n).map(|_| T::lit(rng.uniform(lo, hi))).collect()
            }
            Init::Normal { mu, sigma } => {
                let rng = rng.ok_or_else(|| shape_err!("normal init needs an rng"))?;
                (0..n).map(|_| T::lit(rng.normal(mu, sigma))).collect()
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_extents(shape)?;
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernels that already know the sizes agree.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Extents of a rank-4 tensor as (n, c, h, w).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!("expected rank-4 (n, c, h, w), got {:?}", self.shape)),
        }
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, cc, hh, ww] = self.shape[..] else {
            panic!("at4 on rank {}", self.shape.len())
        };
        self.data[((n * cc + c) * hh + y) * ww + x]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_extents(shape)?;
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("shapes {:?} and {:?} differ", self.shape, other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_lossy(self.data.len())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        )
    }

    /// Channel slice `[from, to)` of a rank-4 tensor.
    pub fn narrow_channels(&self, from: usize, to: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if from >= to || to > c {
            return Err(shape_err!("channel range {from}..{to} outside 0..{c}"));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (to - from) * plane);
        for b in 0..n {
            let base = (b * c + from) * plane;
            out.extend_from_slice(&self.data[base..base + (to - from) * plane]);
        }
        Ok(Self::from_parts(vec![n, to - from, h, w], out))
    }

    /// Spatial window of a rank-4 tensor.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let (n, c, hh, ww) = self.dims4()?;
        if y0 + h > hh || x0 + w > ww || h == 0 || w == 0 {
            return Err(shape_err!(
                "crop {h}x{w} at ({y0}, {x0}) outside {hh}x{ww}"
            ));
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in 0..h {
                let row = (p * hh + y0 + y) * ww + x0;
                out.extend_from_slice(&self.data[row..row + w]);
            }
        }
        Ok(Self::from_parts(vec![n, c, h, w], out))
    }

    /// Stacks rank-4 tensors of identical (c, h, w) along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| shape_err!("empty batch"))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let (tn, tc, th, tw) = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(shape_err!("batch item {:?} does not match {:?}", t.shape, first.shape));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_parts(vec![n, c, h, w], data))
    }
}
