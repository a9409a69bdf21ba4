//! Densely connected 3D trunk with a classification projection and a
//! multi-level segmentation head.

use fcdx_tensor::nn::{BatchNorm, Conv3d};
use fcdx_tensor::{ParamStore, Scalar, Stream, Tape, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub bn1: BatchNorm,
    pub conv1: Conv3d,
    pub bn2: BatchNorm,
    pub conv2: Conv3d,
}

impl DenseLayer {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, growth: usize, bottleneck: usize, s: &mut Stream) -> Result<Self> {
        let mid = bottleneck * growth;
        Ok(DenseLayer {
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cin)?,
            conv1: Conv3d::new(store, &format!("{name}.conv1"), cin, mid, 1, false, s)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), mid)?,
            conv2: Conv3d::new(store, &format!("{name}.conv2"), mid, growth, 3, false, s)?,
        })
    }

    /// Returns `concat(x, new_features)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.bn1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.conv1.forward(tape, store, h)?;
        let h = self.bn2.forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h)?;
        Ok(tape.concat(&[x, h], 1)?)
    }
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DenseBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        repeats: usize,
        growth: usize,
        bottleneck: usize,
        s: &mut Stream,
    ) -> Result<Self> {
        let layers = (0..repeats)
            .map(|i| DenseLayer::new(store, &format!("{name}.layer{i}"), cin + i * growth, growth, bottleneck, s))
            .collect::<Result<_>>()?;
        Ok(DenseBlock { layers, in_channels: cin, out_channels: cin + repeats * growth })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(tape, store, x)?;
        }
        Ok(x)
    }
}

/// BN → ReLU → 1×1×1 conv to `channels / compression` → 2×2×2 average pool.
#[derive(Clone, Debug)]
pub struct Transition {
    pub bn: BatchNorm,
    pub conv: Conv3d,
}

impl Transition {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, compression: usize, s: &mut Stream) -> Result<Self> {
        if compression == 0 || cin % compression != 0 {
            return Err(Error::Config(format!("{name}: compression {compression} does not divide {cin} channels")));
        }
        Ok(Transition {
            bn: BatchNorm::new(store, &format!("{name}.bn"), cin)?,
            conv: Conv3d::new(store, &format!("{name}.conv"), cin, cin / compression, 1, false, s)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.bn.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.conv.forward(tape, store, h)?;
        Ok(tape.avg_pool(h, 2)?)
    }
}

/// Stem conv and three dense blocks joined by transitions.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub stem: Conv3d,
    pub blocks: [DenseBlock; 3],
    pub transitions: [Transition; 2],
    pub channels: [usize; 6],
}

impl Trunk {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        stem: usize,
        blocks: [usize; 3],
        growth: usize,
        bottleneck: usize,
        compression: usize,
        s: &mut Stream,
    ) -> Result<Self> {
        let ch = ModelConfig::trunk_channels(stem, blocks, growth, compression)?;
        let stem_conv = Conv3d::new(store, &format!("{name}.stem"), 1, stem, 3, false, s)?;
        let b1 = DenseBlock::new(store, &format!("{name}.block1"), ch[0], blocks[0], growth, bottleneck, s)?;
        let t1 = Transition::new(store, &format!("{name}.trans1"), ch[1], compression, s)?;
        let b2 = DenseBlock::new(store, &format!("{name}.block2"), ch[2], blocks[1], growth, bottleneck, s)?;
        let t2 = Transition::new(store, &format!("{name}.trans2"), ch[3], compression, s)?;
        let b3 = DenseBlock::new(store, &format!("{name}.block3"), ch[4], blocks[2], growth, bottleneck, s)?;
        debug_assert_eq!([b1.out_channels, b2.out_channels, b3.out_channels], [ch[1], ch[3], ch[5]]);
        Ok(Trunk { stem: stem_conv, blocks: [b1, b2, b3], transitions: [t1, t2], channels: ch })
    }

    /// The three per-level block outputs at full, half and quarter resolution.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<[Var; 3]> {
        let h = self.stem.forward(tape, store, x)?;
        let l1 = self.blocks[0].forward(tape, store, h)?;
        let h = self.transitions[0].forward(tape, store, l1)?;
        let l2 = self.blocks[1].forward(tape, store, h)?;
        let h = self.transitions[1].forward(tape, store, l2)?;
        let l3 = self.blocks[2].forward(tape, store, h)?;
        Ok([l1, l2, l3])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    /// `[b, c, D, H, W]` classification features at input resolution.
    pub cls_features: Var,
    /// The same features before the ×4 upsample.
    pub cls_coarse: Var,
    /// `[b, seg_channels, D, H, W]`, awaiting the prior sample.
    pub seg_features: Var,
    pub levels: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub trunk: Trunk,
    pub cls_bn: BatchNorm,
    pub cls_proj: Conv3d,
    pub seg_bn: [BatchNorm; 3],
    pub seg_proj: [Conv3d; 3],
    pub seg_conv: Conv3d,
    pub input: usize,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, s: &mut Stream) -> Result<Self> {
        let trunk = Trunk::new(store, "backbone", cfg.stem, cfg.blocks, cfg.growth, cfg.bottleneck, cfg.compression, s)?;
        let ch = trunk.channels;
        let level_ch = [ch[1], ch[3], ch[5]];
        let cls_bn = BatchNorm::new(store, "backbone.cls.bn", ch[5])?;
        let cls_proj = Conv3d::new(store, "backbone.cls.proj", ch[5], cfg.width, 1, true, s)?;
        let (mut seg_bn, mut seg_proj) = (Vec::new(), Vec::new());
        for (i, &c) in level_ch.iter().enumerate() {
            seg_bn.push(BatchNorm::new(store, &format!("backbone.seg.level{i}.bn"), c)?);
            seg_proj.push(Conv3d::new(store, &format!("backbone.seg.level{i}.proj"), c, cfg.seg_channels, 1, true, s)?);
        }
        let seg_conv = Conv3d::new(store, "backbone.seg.fuse", 3 * cfg.seg_channels, cfg.seg_channels, 3, true, s)?;
        Ok(Backbone {
            trunk,
            cls_bn,
            cls_proj,
            seg_bn: seg_bn.try_into().unwrap(),
            seg_proj: seg_proj.try_into().unwrap(),
            seg_conv, input: cfg.input })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<BackboneOutput> {
        let shape = tape.shape(x);
        let n = self.input;
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != [n, n, n] {
            return Err(fcdx_tensor::TensorError::Dimension { op: "backbone", lhs: shape.to_vec(), rhs: vec![0, 1, n, n, n] }.into());
        }
        let levels = self.trunk.forward(tape, store, x)?;
        let h = self.cls_bn.forward(tape, store, levels[2])?;
        let h = tape.relu(h);
        let cls_coarse = self.cls_proj.forward(tape, store, h)?;
        let cls_features = tape.upsample(cls_coarse, 4)?;

        let mut parts = Vec::with_capacity(3);
        for (i, &level) in levels.iter().enumerate() {
            let h = self.seg_bn[i].forward(tape, store, level)?;
            let h = tape.relu(h);
            let h = self.seg_proj[i].forward(tape, store, h)?;
            parts.push(tape.upsample(h, 1 << i)?);
        }
        let h = tape.concat(&parts, 1)?;
        let h = self.seg_conv.forward(tape, store, h)?;
        let seg_features = tape.relu(h);
        Ok(BackboneOutput { cls_features, cls_coarse, seg_features, levels })
    }
}
