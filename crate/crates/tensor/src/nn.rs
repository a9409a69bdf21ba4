//! Parameterized layers. Each layer only holds [`ParamId`]s; values live in
//! a [`ParamStore`] so the same layer runs in either precision.

use crate::error::Result;
use crate::param::{he_normal, scaled_normal, ParamId, ParamStore};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv3d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        stream: &mut Stream,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel * kernel;
        let w = he_normal(&[cout, cin, kernel, kernel, kernel], fan_in, stream);
        let weight = store.add(format!("{name}.weight"), w, true)?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true)?) } else { None };
        Ok(Conv3d { weight, bias, in_channels: cin, out_channels: cout, kernel })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv3d(x, w, b)
    }
}

/// Batch normalization with running statistics kept as non-trainable
/// parameters. In a training tape the batch statistics are used and the
/// running update is queued on the tape.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        if tape.is_training() {
            let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
            let m = T::of(BN_MOMENTUM);
            let blend = |old: &Tensor<T>, new: &[T]| {
                Tensor::from_fn(old.shape(), |i| m * old.data()[i] + (T::one() - m) * new[i])
            };
            let rm = blend(store.value(self.running_mean), &mean);
            let rv = blend(store.value(self.running_var), &var);
            tape.push_update(self.running_mean, rm);
            tape.push_update(self.running_var, rv);
            Ok(y)
        } else {
            let mean = store.value(self.running_mean).data();
            let var = store.value(self.running_var).data();
            tape.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)
        }
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        stream: &mut Stream,
    ) -> Result<Self> {
        Self::with_gain(store, name, fan_in, fan_out, bias, std::f64::consts::SQRT_2, stream)
    }

    /// Like [`Linear::new`] with weight std `gain / √fan_in`; gain 1 suits
    /// layers that feed attention or a softmax rather than a rectifier.
    pub fn with_gain<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
        stream: &mut Stream,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), scaled_normal(&[fan_in, fan_out], fan_in, gain, stream), true)?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true)?) } else { None };
        Ok(Linear { weight, bias, in_features: fan_in, out_features: fan_out })
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}
