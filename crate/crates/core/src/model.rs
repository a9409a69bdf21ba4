//! The full network: backbone, prior, attention stack and the two heads,
//! with parameters in one store.

use std::path::Path;

use fcdx_tensor::checkpoint::{self, NamedTensor};
use fcdx_tensor::{ParamStore, Scalar, StreamKey, Tape, Tensor, Var};

use crate::backbone::{Backbone, BackboneOutput};
use crate::cloud::{extract_predicted, CloudExtraction};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nsam::NsamStack;
use crate::prior::{reparameterize, Heads, PriorNet};
use crate::volume::Volume;

/// Upper bound on prior parameters relative to the backbone.
pub const PRIOR_PARAM_RATIO: f64 = 0.55;

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub prior: PriorNet,
    pub nsam: NsamStack,
    pub heads: Heads,
}

/// Everything one batched training-style forward produces.
#[derive(Clone, Debug)]
pub struct Forward {
    pub backbone: BackboneOutput,
    pub mu: Var,
    pub log_var: Var,
    /// Prior samples `[b, latent]`.
    pub f: Var,
    pub seg_logits: Var,
    pub seg_probs: Var,
    pub clouds: Vec<CloudExtraction>,
    /// Batch positions that were classified (not refused), in order.
    pub classified: Vec<usize>,
    /// `[classified.len(), 5]`, absent when everything was refused.
    pub logits: Option<Var>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut s = StreamKey::root(seed).child("init").stream();
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config, &mut s)?;
        let prior = PriorNet::new(&mut store, config, &mut s)?;
        let nsam = NsamStack::new(&mut store, config, &mut s)?;
        let heads = Heads::new(&mut store, config, &mut s)?;
        let model = Model { config: config.clone(), store, backbone, prior, nsam, heads };
        let (b, p) = model.param_counts();
        if p as f64 > PRIOR_PARAM_RATIO * b as f64 {
            return Err(Error::Config(format!("prior has {p} parameters, more than {PRIOR_PARAM_RATIO} of the backbone's {b}")));
        }
        Ok(model)
    }

    /// Trainable parameter counts of the backbone and of the prior.
    pub fn param_counts(&self) -> (usize, usize) {
        (self.store.count("backbone."), self.store.count("prior."))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            prior: self.prior.clone(),
            nsam: self.nsam.clone(),
            heads: self.heads.clone(),
        }
    }

    /// Stacks crops into `[b, 1, n, n, n]`.
    pub fn input(&self, crops: &[&Volume]) -> Result<Tensor<T>> {
        let n = self.config.input;
        let mut data = Vec::with_capacity(crops.len() * n * n * n);
        for c in crops {
            if c.extents != [n; 3] {
                return Err(fcdx_tensor::TensorError::Dimension { op: "model input", lhs: c.extents.to_vec(), rhs: vec![n; 3] }.into());
            }
            data.extend(c.data.iter().map(|&v| T::of(v as f64)));
        }
        Ok(Tensor::new(&[crops.len(), 1, n, n, n], data)?)
    }

    /// Pins the prior variance: the log-variance half of the prior's output
    /// layer gets zero weights and a constant bias.
    pub fn clamp_variance(&mut self, log_var: f64) {
        let l = self.config.latent;
        let w = self.prior.out.weight;
        let cols = 2 * l;
        for (i, v) in self.store.get_mut(w).value.data_mut().iter_mut().enumerate() {
            if i % cols >= l {
                *v = T::zero();
            }
        }
        if let Some(b) = self.prior.out.bias {
            for v in &mut self.store.get_mut(b).value.data_mut()[l..] {
                *v = T::of(log_var);
            }
        }
    }

    /// Runs the network on a batch. Clouds come from each item's predicted
    /// segmentation unless `clouds` supplies them.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, noise: Tensor<T>, clouds: Option<Vec<CloudExtraction>>) -> Result<Forward> {
        let batch = tape.shape(x)[0];
        let bb = self.backbone.forward(tape, &self.store, x)?;
        let (mu, log_var) = self.prior.forward(tape, &self.store, x)?;
        let f = reparameterize(tape, mu, log_var, noise)?;
        let seg_logits = self.heads.segment(tape, &self.store, bb.seg_features, f)?;
        let seg_probs = tape.sigmoid(seg_logits);

        let n = self.config.input;
        let voxels = n * n * n;
        let clouds = match clouds {
            Some(c) => c,
            None => (0..batch)
                .map(|i| {
                    let p = &tape.value(seg_probs).data()[i * voxels..(i + 1) * voxels];
                    extract_predicted(p, [n; 3], self.config.max_points, self.config.refusal_volume)
                })
                .collect::<Result<_>>()?,
        };
        if clouds.len() != batch {
            return Err(Error::Argument(format!("{} clouds for a batch of {batch}", clouds.len())));
        }

        let mut reps = Vec::new();
        let mut samples = Vec::new();
        let mut classified = Vec::new();
        for (i, c) in clouds.iter().enumerate() {
            if let Some(cloud) = c.cloud() {
                let pts = cloud.gather(tape, bb.cls_features, i)?;
                reps.push(self.nsam.forward(tape, &self.store, pts)?);
                samples.push(tape.slice(f, 0, i, 1)?);
                classified.push(i);
            }
        }
        let logits = if classified.is_empty() {
            None
        } else {
            let rep = tape.concat(&reps, 0)?;
            let fs = tape.concat(&samples, 0)?;
            Some(self.heads.classify(tape, &self.store, rep, fs)?)
        };
        Ok(Forward { backbone: bb, mu, log_var, f, seg_logits, seg_probs, clouds, classified, logits })
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.store.to_named()
    }

    pub fn load_named(&mut self, entries: &[NamedTensor]) -> Result<()> {
        Ok(self.store.load_named(entries)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        checkpoint::save(path, &self.to_named()).map_err(|e| wrap_checkpoint(path, e))
    }

    /// Builds a model for `config` and fills it from a checkpoint file.
    pub fn load(config: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m = Self::new(config, 0)?;
        let entries = checkpoint::load(path).map_err(|e| wrap_checkpoint(path, e))?;
        m.load_named(&entries)?;
        Ok(m)
    }
}

pub(crate) fn wrap_checkpoint(path: &Path, e: fcdx_tensor::TensorError) -> Error {
    match e {
        fcdx_tensor::TensorError::Io(io) => Error::io(path, io),
        fcdx_tensor::TensorError::Format { offset, msg } => Error::format(path, offset, msg),
        other => other.into(),
    }
}
