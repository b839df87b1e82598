//! Parameterised layers and the forward context they run in.

use crate::autograd::{BatchStats, Graph, PadMode, ReduceOp, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Init, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN, running stats updated after the pass.
    Train,
    /// Running statistics only; nothing is mutated.
    Eval,
    /// Batch statistics in BN, nothing is mutated.
    EvalBatchStats,
}

struct BnUpdate<T> {
    mean: BufferId,
    var: BufferId,
    stats: BatchStats<T>,
}

/// Running-stat updates collected during a training forward pass.
pub struct BnUpdates<T>(Vec<BnUpdate<T>>);

impl<T: Scalar> BnUpdates<T> {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `running <- (1 - momentum) running + momentum batch`.
    pub fn apply(self, store: &mut ParamStore<T>) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for u in self.0 {
            for (id, batch) in [(u.mean, u.stats.mean), (u.var, u.stats.var_unbiased)] {
                for (r, b) in store.buffer_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }
}

/// Graph, parameters and mode for one forward pass.
pub struct Ctx<'s, T: Scalar> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    bn: Vec<BnUpdate<T>>,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    pub fn new(graph: Graph<T>, store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            bn: Vec::new(),
        }
    }

    /// Inference context: no tape, eval-mode BN.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self::new(Graph::no_grad(), store, Mode::Eval)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var<T> {
        self.graph.param(self.store, id)
    }

    pub fn finish(self) -> (Graph<T>, BnUpdates<T>) {
        (self.graph, BnUpdates(self.bn))
    }
}

fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Result<Tensor<T>> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::create(shape, Init::Uniform { lo: -bound, hi: bound }, Some(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: PadMode,
    pub groups: usize,
    pub bias: bool,
}

impl Conv2dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: PadMode::Reflect,
            groups: 1,
            bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, (1, 1))
    }

    pub fn depthwise(channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel)
        }
    }

    pub fn stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    pub fn padding(self, padding: PadMode) -> Self {
        Self { padding, ..self }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }

    fn validate(&self) -> Result<()> {
        let ok = self.in_channels > 0
            && self.out_channels > 0
            && self.kernel.0 > 0
            && self.kernel.1 > 0
            && self.stride > 0
            && (self.groups == 1 || self.is_depthwise());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid conv spec {self:?} (only dense or depthwise groups)")))
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups, self.kernel.0, self.kernel.1]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_channels } else { 0 }
    }
}

/// Convolution with "same" padding `(k - 1) / 2` per axis, applied before
/// the valid convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: Conv2dSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: Conv2dSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let shape = spec.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let weight = store.register(&format!("{name}.weight"), kaiming_uniform(&shape, fan_in, rng)?, true)?;
        let bias = if spec.bias {
            Some(store.register(&format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]), false)?)
        } else {
            None
        };
        Ok(Self { spec, weight, bias })
    }

    /// Sets weight and bias to zero.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in [Some(self.weight), self.bias].into_iter().flatten() {
            store.param_mut(id).value_mut().data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let c = x.value().dims4()?.1;
        if c != self.spec.in_channels {
            return Err(shape_err!("conv expects {} channels, got {c}", self.spec.in_channels));
        }
        let (ph, pw) = ((self.spec.kernel.0 - 1) / 2, (self.spec.kernel.1 - 1) / 2);
        let padded;
        let input = if ph > 0 || pw > 0 {
            padded = cx.graph.pad2d(x, [ph, ph, pw, pw], self.spec.padding)?;
            &padded
        } else {
            x
        };
        let w = cx.param(self.weight);
        let b = self.bias.map(|id| cx.param(id));
        cx.graph.conv2d(input, &w, b.as_ref(), self.spec.stride, self.spec.groups)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            channels,
            gamma: store.register(&format!("{name}.weight"), Tensor::ones(&[channels]), false)?,
            beta: store.register(&format!("{name}.bias"), Tensor::zeros(&[channels]), false)?,
            running_mean: store.register_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.register_buffer(&format!("{name}.running_var"), Tensor::ones(&[channels]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        match cx.mode {
            Mode::Train => {
                let (y, stats) = cx.graph.batch_norm_train(x, &gamma, &beta, BN_EPS)?;
                cx.bn.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::EvalBatchStats => Ok(cx.graph.batch_norm_train(x, &gamma, &beta, BN_EPS)?.0),
            Mode::Eval => {
                let store = cx.store;
                cx.graph.batch_norm_eval(
                    x,
                    &gamma,
                    &beta,
                    store.buffer(self.running_mean),
                    store.buffer(self.running_var),
                    BN_EPS,
                )
            }
        }
    }
}

/// Squeeze-excitation gate: `x * sigmoid(W2 relu(W1 gap(x)))`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible by reduction {reduction}")));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Conv2d::new(store, &format!("{name}.fc1"), Conv2dSpec::pointwise(channels, hidden), rng)?,
            fc2: Conv2d::new(store, &format!("{name}.fc2"), Conv2dSpec::pointwise(hidden, channels), rng)?,
        })
    }

    /// Per-channel gain in (0, 1), shape `[N, C, 1, 1]`.
    pub fn gate<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let s = cx.graph.reduce(ReduceOp::Mean, x, &[2, 3])?;
        let s = self.fc1.forward(cx, &s)?;
        let s = cx.graph.relu(&s)?;
        let s = self.fc2.forward(cx, &s)?;
        cx.graph.sigmoid(&s)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let s = self.gate(cx, x)?;
        cx.graph.mul(x, &s)
    }
}
