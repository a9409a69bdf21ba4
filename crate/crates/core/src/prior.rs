//! Input-conditioned Gaussian prior over a small latent that conditions
//! both output heads.

use fcdx_tensor::nn::{BatchNorm, Conv3d, Linear};
use fcdx_tensor::{ParamStore, Scalar, Stream, Tape, Tensor, Var};

use crate::backbone::Trunk;
use crate::config::{ModelConfig, CLASSES};
use crate::error::Result;

/// A reduced dense trunk ending in global pooling and a linear map to
/// `(mu, log_var)`.
#[derive(Clone, Debug)]
pub struct PriorNet {
    pub trunk: Trunk,
    pub bn: BatchNorm,
    pub out: Linear,
    pub latent: usize,
}

impl PriorNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, s: &mut Stream) -> Result<Self> {
        let trunk = Trunk::new(store, "prior", cfg.prior_stem, cfg.prior_blocks, cfg.prior_growth, cfg.bottleneck, cfg.compression, s)?;
        let c = trunk.channels[5];
        Ok(PriorNet {
            bn: BatchNorm::new(store, "prior.bn", c)?,
            out: Linear::new(store, "prior.out", c, 2 * cfg.latent, true, s)?,
            trunk,
            latent: cfg.latent,
        })
    }

    /// `(mu, log_var)`, each `[b, latent]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let [_, _, l3] = self.trunk.forward(tape, store, x)?;
        let h = self.bn.forward(tape, store, l3)?;
        let h = tape.relu(h);
        let pooled = tape.spatial_mean(h)?;
        let out = self.out.forward(tape, store, pooled)?;
        let mu = tape.slice(out, 1, 0, self.latent)?;
        let log_var = tape.slice(out, 1, self.latent, self.latent)?;
        Ok((mu, log_var))
    }
}

/// Standard-normal draws `[b, latent]` for the reparameterized sample.
pub fn draw_noise<T: Scalar>(rows: usize, latent: usize, stream: &mut Stream) -> Tensor<T> {
    Tensor::from_fn(&[rows, latent], |_| T::of(stream.normal()))
}

/// `f = exp(0.5·log_var) ⊙ noise + mu`; the noise is a constant.
pub fn reparameterize<T: Scalar>(tape: &mut Tape<T>, mu: Var, log_var: Var, noise: Tensor<T>) -> Result<Var> {
    let half = tape.scale(log_var, T::of(0.5));
    let sigma = tape.exp(half);
    let x = tape.constant(noise);
    let scaled = tape.mul(sigma, x)?;
    Ok(tape.add(scaled, mu)?)
}

/// Initial segmentation logit; lesions fill a few percent of a crop.
pub const SEG_BIAS_INIT: f64 = -3.0;

/// Classification head on `concat(rep, f)` and the final segmentation conv
/// on `concat(seg_features, tile(f))`.
#[derive(Clone, Debug)]
pub struct Heads {
    pub fc1: Linear,
    pub fc2: Linear,
    pub seg_out: Conv3d,
}

impl Heads {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, s: &mut Stream) -> Result<Self> {
        let heads = Heads {
            fc1: Linear::new(store, "head.cls.fc1", cfg.width + cfg.latent, cfg.head_hidden, true, s)?,
            fc2: Linear::with_gain(store, "head.cls.fc2", cfg.head_hidden, CLASSES, true, 1.0, s)?,
            seg_out: Conv3d::new(store, "head.seg.out", cfg.seg_channels + cfg.latent, 1, 1, true, s)?,
        };
        if let Some(b) = heads.seg_out.bias {
            store.get_mut(b).value.data_mut().fill(T::of(SEG_BIAS_INIT));
        }
        Ok(heads)
    }

    /// `[m, 5]` logits from representations `[m, c]` and samples `[m, latent]`.
    pub fn classify<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, rep: Var, f: Var) -> Result<Var> {
        let h = tape.concat(&[rep, f], 1)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.elu(h);
        Ok(self.fc2.forward(tape, store, h)?)
    }

    /// `[b, 1, D, H, W]` logits from `seg_features [b, s, D, H, W]` and `f [b, latent]`.
    pub fn segment<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, seg_features: Var, f: Var) -> Result<Var> {
        let sh = tape.shape(seg_features);
        let spatial = [sh[2], sh[3], sh[4]];
        let tiled = tape.broadcast_spatial(f, spatial)?;
        let h = tape.concat(&[seg_features, tiled], 1)?;
        Ok(self.seg_out.forward(tape, store, h)?)
    }
}
