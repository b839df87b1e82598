//! Named trainable parameters and non-trainable buffers.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    value: Arc<Tensor<T>>,
    pub grad: Tensor<T>,
    /// Whether decoupled weight decay applies (conv weights only).
    pub decay: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }

    /// Value and gradient borrowed together, for optimizer updates.
    pub fn split_mut(&mut self) -> (&mut Tensor<T>, &Tensor<T>) {
        (Arc::make_mut(&mut self.value), &self.grad)
    }
}

#[derive(Debug, Clone)]
pub struct Buffer<T> {
    pub name: String,
    value: Arc<Tensor<T>>,
}

#[derive(Debug, Clone, Copy)]
pub enum Slot {
    Param(ParamId),
    Buffer(BufferId),
}

/// Owner of every parameter and buffer of a model, addressed by unique
/// dotted names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: BTreeMap<String, Slot>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            names: BTreeMap::new(),
        }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>, decay: bool) -> Result<ParamId> {
        let id = ParamId(self.params.len());
        self.claim(name, Slot::Param(id))?;
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value: Arc::new(value),
            grad,
            decay,
        });
        Ok(id)
    }

    pub fn register_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        let id = BufferId(self.buffers.len());
        self.claim(name, Slot::Buffer(id))?;
        self.buffers.push(Buffer {
            name: name.to_string(),
            value: Arc::new(value),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_arc(&self, id: BufferId) -> Arc<Tensor<T>> {
        Arc::clone(&self.buffers[id.0].value)
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.buffers[id.0].value)
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn lookup(&self, name: &str) -> Option<Slot> {
        self.names.get(name).copied()
    }

    /// Every parameter and buffer in name order.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(|(name, slot)| {
                let t: &Tensor<T> = match *slot {
                    Slot::Param(id) => &self.params[id.0].value,
                    Slot::Buffer(id) => &self.buffers[id.0].value,
                };
                (name.as_str(), t)
            })
            .collect()
    }

    /// Overwrites the tensor stored under `name`, shape must agree.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .lookup(name)
            .ok_or_else(|| Error::UnknownKey(name.to_string()))?;
        let target = match slot {
            Slot::Param(id) => Arc::make_mut(&mut self.params[id.0].value),
            Slot::Buffer(id) => Arc::make_mut(&mut self.buffers[id.0].value),
        };
        if target.shape() != value.shape() {
            return Err(Error::KeyShape {
                key: name.to_string(),
                found: value.shape().to_vec(),
                expected: target.shape().to_vec(),
            });
        }
        *target = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.register("a.weight", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.register("a.weight", Tensor::zeros(&[2]), true).is_err());
        assert!(s.register_buffer("a.weight", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn grad_mirrors_value_shape() {
        let mut s = ParamStore::<f64>::new();
        let id = s.register("w", Tensor::ones(&[3, 2]), true).unwrap();
        assert_eq!(s.param(id).grad.shape(), s.param(id).value().shape());
        assert_eq!(s.count(), 6);
    }

    #[test]
    fn assign_checks_shape() {
        let mut s = ParamStore::<f64>::new();
        s.register("w", Tensor::ones(&[3]), true).unwrap();
        assert!(matches!(s.assign("w", Tensor::ones(&[2])), Err(Error::KeyShape { .. })));
        assert!(matches!(s.assign("v", Tensor::ones(&[3])), Err(Error::UnknownKey(_))));
        s.assign("w", Tensor::zeros(&[3])).unwrap();
    }
}
