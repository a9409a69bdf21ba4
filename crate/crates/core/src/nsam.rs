//! Shared-weight multi-head self-attention over feature clouds.
//!
//! Each head projects the cloud with a single matrix `W_i` that serves as
//! key, query and value map at once, attends with
//! `softmax(X_i X_iᵀ / √c_i) · ELU(X_i)`, and the concatenated heads are
//! added back onto the input.

use fcdx_tensor::nn::Linear;
use fcdx_tensor::{ParamStore, Scalar, Stream, Tape, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct NsamLayer {
    pub heads: Vec<Linear>,
    pub width: usize,
}

impl NsamLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, heads: usize, s: &mut Stream) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {width}")));
        }
        let heads = (0..heads)
            .map(|h| Linear::with_gain(store, &format!("{name}.head{h}"), width, width / heads, false, 1.0, s))
            .collect::<fcdx_tensor::Result<_>>()?;
        Ok(NsamLayer { heads, width })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let xi = head.forward(tape, store, x)?;
            outs.push(tape.attention(xi)?);
        }
        let cat = tape.concat(&outs, 1)?;
        Ok(tape.add(cat, x)?)
    }
}

#[derive(Clone, Debug)]
pub struct NsamStack {
    pub layers: Vec<NsamLayer>,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

impl NsamStack {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, s: &mut Stream) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|l| NsamLayer::new(store, &format!("nsam.layer{l}"), cfg.width, cfg.heads, s))
            .collect::<Result<_>>()?;
        Ok(NsamStack {
            layers,
            mlp1: Linear::new(store, "nsam.mlp1", cfg.width, cfg.mlp_hidden, true, s)?,
            mlp2: Linear::new(store, "nsam.mlp2", cfg.mlp_hidden, cfg.width, true, s)?,
        })
    }

    /// The cloud after all attention layers, still `[N, c]`.
    pub fn points<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        if tape.shape(x).first() == Some(&0) {
            return Err(Error::Argument("feature cloud is empty".into()));
        }
        for l in &self.layers {
            x = l.forward(tape, store, x)?;
        }
        Ok(x)
    }

    /// The post-pooling MLP, applied row-wise to `[m, c]`.
    pub fn mlp<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.mlp1.forward(tape, store, x)?;
        let h = tape.elu(h);
        self.mlp2.forward(tape, store, h).map_err(Into::into)
    }

    /// Lesion representation `[1, c]`: attention layers, mean over points, MLP.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, cloud: Var) -> Result<Var> {
        let p = self.points(tape, store, cloud)?;
        let pooled = tape.mean_rows(p)?;
        let c = tape.shape(pooled)[0];
        let pooled = tape.reshape(pooled, &[1, c])?;
        self.mlp(tape, store, pooled)
    }
}
