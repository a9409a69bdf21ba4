use std::collections::HashMap;

use crate::checkpoint::NamedTensor;
use crate::error::{Result, TensorError};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named model tensor. Non-trainable entries hold running statistics.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad, trainable });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.trainable && p.name.starts_with(prefix)).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds parameter gradients from one backward pass.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            p.grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
        }
    }

    /// Overwrites buffers (e.g. batchnorm running statistics).
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, v) in updates {
            self.params[id.0].value = v;
        }
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.f64() as f32).collect(),
            })
            .collect()
    }

    /// Loads every parameter by name; extra entries are ignored.
    pub fn load_named(&mut self, entries: &[NamedTensor]) -> Result<()> {
        let by_name: HashMap<&str, &NamedTensor> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
        for p in &mut self.params {
            let e = by_name.get(p.name.as_str()).ok_or_else(|| TensorError::UnknownParam(p.name.clone()))?;
            if e.shape != p.value.shape() {
                return Err(TensorError::dim("load_named", p.value.shape(), &e.shape));
            }
            p.value = Tensor::new(&e.shape, e.data.iter().map(|&v| T::of(v as f64)).collect())?;
        }
        Ok(())
    }

    /// Same names and shapes, values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// He-style normal initialization, `N(0, 2 / fan_in)`.
pub fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, stream: &mut Stream) -> Tensor<T> {
    scaled_normal(shape, fan_in, std::f64::consts::SQRT_2, stream)
}

/// Normal weights with standard deviation `gain / √fan_in`.
pub fn scaled_normal<T: Scalar>(shape: &[usize], fan_in: usize, gain: f64, stream: &mut Stream) -> Tensor<T> {
    let std = gain / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(std * stream.normal()))
}
