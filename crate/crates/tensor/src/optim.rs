use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of a single tensor; `step` is 1-based.
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(TensorError::dim("adam_step", &[param.len()], &[grad.len(), m.len(), v.len()]));
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(step as i32));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Adam state aligned with a [`ParamStore`]; buffers of non-trainable
/// entries stay empty.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |_: ()| {
            store
                .iter()
                .map(|(_, p)| if p.trainable { Tensor::zeros(p.value.shape()) } else { Tensor::zeros(&[0]) })
                .collect()
        };
        Adam { config, step: 0, m: zeros(()), v: zeros(()) }
    }

    /// Applies the accumulated gradients of every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step += 1;
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            adam_update(
                p.value.data_mut(),
                p.grad.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.step,
                &self.config,
            )?;
        }
        Ok(())
    }
}
