//! Feature-cloud sampling: which voxels of the classification feature map
//! become attention inputs, and when a lesion is too small to classify.

use fcdx_tensor::{Scalar, Stream, Tape, Var};

use crate::error::{Error, Result};
use crate::volume::{coords, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Manual,
    Predicted,
}

/// Selected voxels, as flat indices in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureCloud {
    pub indices: Vec<usize>,
    pub extents: [usize; 3],
    pub source: Source,
}

impl FeatureCloud {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn coords(&self) -> Vec<[usize; 3]> {
        self.indices.iter().map(|&i| coords(self.extents, i)).collect()
    }

    /// The `[N, c]` point matrix taken from batch item `batch` of a
    /// `[b, c, D, H, W]` feature map.
    pub fn gather<T: Scalar>(&self, tape: &mut Tape<T>, features: Var, batch: usize) -> Result<Var> {
        Ok(tape.gather_points(features, batch, &self.indices)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Extraction {
    Cloud(FeatureCloud),
    Refusal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloudExtraction {
    pub extraction: Extraction,
    /// Soft volume estimate `Σ p`.
    pub volume: f64,
}

impl CloudExtraction {
    pub fn cloud(&self) -> Option<&FeatureCloud> {
        match &self.extraction {
            Extraction::Cloud(c) => Some(c),
            Extraction::Refusal => None,
        }
    }

    pub fn refused(&self) -> bool {
        matches!(self.extraction, Extraction::Refusal)
    }
}

/// `Σ p` over a probability map; every value must lie in `[0, 1]`.
pub fn estimate_volume<T: Scalar>(probs: &[T]) -> Result<f64> {
    let mut sum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.f64();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Argument(format!("segmentation probability {p} at voxel {i} is outside [0, 1]")));
        }
        sum += p;
    }
    Ok(sum)
}

/// Top-`K` voxels by probability with `K = min(⌊v̂⌋, max_points)`, or a
/// refusal when `v̂ < refusal_volume`. Ties go to the lower voxel index.
pub fn extract_predicted<T: Scalar>(probs: &[T], extents: [usize; 3], max_points: usize, refusal_volume: f64) -> Result<CloudExtraction> {
    if probs.len() != extents.iter().product::<usize>() {
        return Err(Error::Argument(format!("{} probabilities for grid {extents:?}", probs.len())));
    }
    let volume = estimate_volume(probs)?;
    if volume < refusal_volume {
        return Ok(CloudExtraction { extraction: Extraction::Refusal, volume });
    }
    let k = (volume.floor() as usize).min(max_points).min(probs.len());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    let key = |i: usize| probs[i].f64();
    order.select_nth_unstable_by(k.saturating_sub(1), |&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    if k == 0 {
        return Ok(CloudExtraction { extraction: Extraction::Refusal, volume });
    }
    Ok(CloudExtraction { extraction: Extraction::Cloud(FeatureCloud { indices, extents, source: Source::Predicted }), volume })
}

/// Every mask voxel when there are at most `max_points`, otherwise a
/// uniform subset of `max_points` drawn without replacement.
pub fn extract_manual(mask: &Mask, max_points: usize, stream: &mut Stream) -> Result<CloudExtraction> {
    let support: Vec<usize> = mask.data.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i).collect();
    if support.is_empty() {
        return Err(Error::Argument("manual mask is empty".into()));
    }
    let volume = support.len() as f64;
    let indices = if support.len() <= max_points {
        support
    } else {
        let mut picked: Vec<usize> = stream.sample_indices(support.len(), max_points).into_iter().map(|j| support[j]).collect();
        picked.sort_unstable();
        picked
    };
    Ok(CloudExtraction { extraction: Extraction::Cloud(FeatureCloud { indices, extents: mask.extents, source: Source::Manual }), volume })
}
