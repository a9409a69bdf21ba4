//! Rigid voxel-grid augmentation: a right-angle rotation, an optional flip
//! and a one-voxel shift, each about a randomly chosen axis.

use fcdx_tensor::Stream;

use crate::volume::{coords, index, Mask, Volume, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    /// Rotation is in the plane of the two axes other than `rotate_axis`.
    pub rotate_axis: usize,
    pub quarter_turns: usize,
    pub flip_axis: Option<usize>,
    pub shift_axis: usize,
    /// One of −1, 0, +1.
    pub shift: isize,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { rotate_axis: 0, quarter_turns: 0, flip_axis: None, shift_axis: 0, shift: 0 };

    pub fn draw(stream: &mut Stream) -> Self {
        let rotate_axis = stream.below(3);
        let quarter_turns = stream.below(4);
        let flip = stream.bernoulli(0.5);
        let flip_axis = stream.below(3);
        let shift_axis = stream.below(3);
        let shift = stream.below(3) as isize - 1;
        Transform { rotate_axis, quarter_turns, flip_axis: flip.then_some(flip_axis), shift_axis, shift }
    }

    pub fn is_identity(&self) -> bool {
        self.quarter_turns % 4 == 0 && self.flip_axis.is_none() && self.shift == 0
    }

    /// Source voxel for output voxel `p`, or `None` when it falls in the
    /// plane vacated by the shift. Extents must be equal in the rotation plane.
    fn source(&self, e: [usize; 3], p: [usize; 3]) -> Option<[usize; 3]> {
        // Undo the steps in reverse order: shift, flip, rotation.
        let mut q = [p[0] as isize, p[1] as isize, p[2] as isize];
        q[self.shift_axis] -= self.shift;
        if q[self.shift_axis] < 0 || q[self.shift_axis] >= e[self.shift_axis] as isize {
            return None;
        }
        if let Some(a) = self.flip_axis {
            q[a] = e[a] as isize - 1 - q[a];
        }
        let (a, b) = plane(self.rotate_axis);
        let n = e[a] as isize;
        for _ in 0..self.quarter_turns % 4 {
            // Forward quarter turn maps (u, v) to (v, n−1−u); invert it.
            let (u, v) = (q[a], q[b]);
            q[a] = n - 1 - v;
            q[b] = u;
        }
        Some([q[0] as usize, q[1] as usize, q[2] as usize])
    }

    fn apply<T: Copy>(&self, extents: [usize; 3], data: &[T], fill: T) -> Vec<T> {
        if self.is_identity() {
            return data.to_vec();
        }
        let (a, b) = plane(self.rotate_axis);
        assert!(self.quarter_turns % 4 == 0 || extents[a] == extents[b], "rotation needs a square plane, got {extents:?}");
        (0..data.len())
            .map(|i| match self.source(extents, coords(extents, i)) {
                Some([z, y, x]) => data[index(extents, z, y, x)],
                None => fill,
            })
            .collect()
    }

    pub fn apply_volume(&self, v: &Volume) -> Volume {
        Volume { extents: v.extents, spacing: v.spacing, data: self.apply(v.extents, &v.data, PAD) }
    }

    pub fn apply_mask(&self, m: &Mask) -> Mask {
        Mask { extents: m.extents, data: self.apply(m.extents, &m.data, 0) }
    }
}

fn plane(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Draws one transform and applies it to the image and every mask.
pub fn augment(crop: &Volume, masks: &[Mask], stream: &mut Stream) -> (Volume, Vec<Mask>, Transform) {
    let t = Transform::draw(stream);
    (t.apply_volume(crop), masks.iter().map(|m| t.apply_mask(m)).collect(), t)
}
