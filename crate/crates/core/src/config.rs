//! Network hyperparameters and their `key=value` text form.

use std::fmt::Write;

use crate::error::{Error, Result};

pub const CLASSES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input cube side; must be divisible by 4.
    pub input: usize,
    pub stem: usize,
    pub blocks: [usize; 3],
    pub growth: usize,
    pub bottleneck: usize,
    pub compression: usize,
    /// Feature-cloud and attention width `c`.
    pub width: usize,
    pub seg_channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
    pub latent: usize,
    pub prior_stem: usize,
    pub prior_blocks: [usize; 3],
    pub prior_growth: usize,
    pub max_points: usize,
    pub refusal_volume: f64,
}

impl ModelConfig {
    /// Full-size network: 32³ input, blocks [3, 8, 4], growth 32.
    pub fn paper() -> Self {
        ModelConfig {
            input: 32,
            stem: 32,
            blocks: [3, 8, 4],
            growth: 32,
            bottleneck: 4,
            compression: 2,
            width: 256,
            seg_channels: 16,
            layers: 3,
            heads: 8,
            mlp_hidden: 128,
            head_hidden: 128,
            latent: 6,
            prior_stem: 16,
            prior_blocks: [2, 4, 2],
            prior_growth: 16,
            max_points: 1024,
            refusal_volume: 10.0,
        }
    }

    /// Narrow network that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            stem: 8,
            blocks: [2, 3, 2],
            growth: 4,
            bottleneck: 2,
            width: 32,
            seg_channels: 8,
            heads: 4,
            mlp_hidden: 32,
            head_hidden: 32,
            prior_stem: 4,
            prior_blocks: [1, 2, 1],
            prior_growth: 4,
            ..Self::paper()
        }
    }

    /// 8³ input and at most 8 cloud points, for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            input: 8,
            stem: 4,
            blocks: [2, 2, 1],
            growth: 2,
            bottleneck: 2,
            width: 8,
            seg_channels: 2,
            layers: 2,
            heads: 2,
            mlp_hidden: 6,
            head_hidden: 6,
            prior_stem: 2,
            prior_blocks: [1, 1, 1],
            prior_growth: 2,
            max_points: 8,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset `{other}` (expected paper, desk or tiny)"))),
        }
    }

    /// Trunk channel counts: stem, then (block output, transition output)
    /// per level, ending with the third block.
    pub fn trunk_channels(stem: usize, blocks: [usize; 3], growth: usize, compression: usize) -> Result<[usize; 6]> {
        let b1 = stem + blocks[0] * growth;
        if b1 % compression != 0 {
            return Err(Error::Config(format!("compression {compression} does not divide {b1} channels")));
        }
        let t1 = b1 / compression;
        let b2 = t1 + blocks[1] * growth;
        if b2 % compression != 0 {
            return Err(Error::Config(format!("compression {compression} does not divide {b2} channels")));
        }
        let t2 = b2 / compression;
        Ok([stem, b1, t1, b2, t2, t2 + blocks[2] * growth])
    }

    pub fn backbone_channels(&self) -> Result<[usize; 6]> {
        Self::trunk_channels(self.stem, self.blocks, self.growth, self.compression)
    }

    pub fn prior_channels(&self) -> Result<[usize; 6]> {
        Self::trunk_channels(self.prior_stem, self.prior_blocks, self.prior_growth, self.compression)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input", self.input),
            ("stem", self.stem),
            ("growth", self.growth),
            ("bottleneck", self.bottleneck),
            ("compression", self.compression),
            ("width", self.width),
            ("seg_channels", self.seg_channels),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("head_hidden", self.head_hidden),
            ("latent", self.latent),
            ("prior_stem", self.prior_stem),
            ("prior_growth", self.prior_growth),
            ("max_points", self.max_points),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.input % 4 != 0 {
            return Err(Error::Config(format!("input {} is not divisible by 4", self.input)));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.width)));
        }
        if self.blocks.contains(&0) || self.prior_blocks.contains(&0) {
            return Err(Error::Config("every dense block needs at least one layer".into()));
        }
        if !(self.refusal_volume >= 0.0) {
            return Err(Error::Config("refusal_volume must be non-negative".into()));
        }
        self.backbone_channels()?;
        self.prior_channels()?;
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let list = |b: [usize; 3]| format!("{},{},{}", b[0], b[1], b[2]);
        for (k, v) in [
            ("input", self.input.to_string()),
            ("stem", self.stem.to_string()),
            ("blocks", list(self.blocks)),
            ("growth", self.growth.to_string()),
            ("bottleneck", self.bottleneck.to_string()),
            ("compression", self.compression.to_string()),
            ("width", self.width.to_string()),
            ("seg_channels", self.seg_channels.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("latent", self.latent.to_string()),
            ("prior_stem", self.prior_stem.to_string()),
            ("prior_blocks", list(self.prior_blocks)),
            ("prior_growth", self.prior_growth.to_string()),
            ("max_points", self.max_points.to_string()),
            ("refusal_volume", self.refusal_volume.to_string()),
        ] {
            writeln!(s, "model.{k}={v}").unwrap();
        }
        s
    }

    /// Applies one `model.*` key (without the prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("model.{key}: cannot parse `{value}`"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        let list = || -> Result<[usize; 3]> {
            let v: Vec<usize> = value.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
            v.try_into().map_err(|_| bad())
        };
        match key {
            "preset" => *self = Self::preset(value)?,
            "input" => self.input = int()?,
            "stem" => self.stem = int()?,
            "blocks" => self.blocks = list()?,
            "growth" => self.growth = int()?,
            "bottleneck" => self.bottleneck = int()?,
            "compression" => self.compression = int()?,
            "width" => self.width = int()?,
            "seg_channels" => self.seg_channels = int()?,
            "layers" => self.layers = int()?,
            "heads" => self.heads = int()?,
            "mlp_hidden" => self.mlp_hidden = int()?,
            "head_hidden" => self.head_hidden = int()?,
            "latent" => self.latent = int()?,
            "prior_stem" => self.prior_stem = int()?,
            "prior_blocks" => self.prior_blocks = list()?,
            "prior_growth" => self.prior_growth = int()?,
            "max_points" => self.max_points = int()?,
            "refusal_volume" => self.refusal_volume = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown key model.{key}"))),
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
