//! Slice-level forward/backward kernels used by the tape.

pub mod attention;
pub mod conv;
pub mod norm;
pub mod resize;
pub mod softmax;

/// Normalizes a volumetric shape to `[batch, channels, d, h, w]`.
/// Rank-4 shapes are treated as a batch of one.
pub fn vol_dims(shape: &[usize]) -> Option<[usize; 5]> {
    match *shape {
        [c, d, h, w] => Some([1, c, d, h, w]),
        [b, c, d, h, w] => Some([b, c, d, h, w]),
        _ => None,
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
