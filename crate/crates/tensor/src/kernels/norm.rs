//! Per-channel batch normalization over `[batch, channels, spatial]`.
//!
//! Statistics accumulate in f64 in a fixed order.

use crate::scalar::Scalar;

pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
}

pub fn batch_stats<T: Scalar>(x: &[T], b: usize, c: usize, s: usize) -> BatchStats<T> {
    let m = (b * s) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let chunks = || (0..b).map(move |bi| &x[(bi * c + ch) * s..(bi * c + ch + 1) * s]);
        let mu = chunks().flat_map(|r| r.iter()).map(|v| v.f64()).sum::<f64>() / m;
        let sq = chunks().flat_map(|r| r.iter()).map(|v| (v.f64() - mu).powi(2)).sum::<f64>() / m;
        mean[ch] = T::of(mu);
        var[ch] = T::of(sq);
    }
    BatchStats { mean, var }
}

pub fn inv_std<T: Scalar>(var: &[T], eps: f64) -> Vec<T> {
    var.iter().map(|v| T::of(1.0 / (v.f64() + eps).sqrt())).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn normalize<T: Scalar>(
    x: &[T],
    b: usize,
    c: usize,
    s: usize,
    mean: &[T],
    inv: &[T],
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let r = (bi * c + ch) * s..(bi * c + ch + 1) * s;
            let (scale, shift) = (gamma[ch] * inv[ch], beta[ch] - gamma[ch] * inv[ch] * mean[ch]);
            for (o, &v) in y[r.clone()].iter_mut().zip(&x[r]) {
                *o = v * scale + shift;
            }
        }
    }
    y
}

pub struct NormGrads<T> {
    pub x: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// With `batch_mode` the normalization statistics are functions of `x`
/// (training); otherwise they are constants (inference).
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    x: &[T],
    g: &[T],
    b: usize,
    c: usize,
    s: usize,
    mean: &[T],
    inv: &[T],
    gamma: &[T],
    batch_mode: bool,
) -> NormGrads<T> {
    let m = (b * s) as f64;
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ch in 0..c {
        let rows = |bi: usize| (bi * c + ch) * s..(bi * c + ch + 1) * s;
        let (mu, is) = (mean[ch].f64(), inv[ch].f64());
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for bi in 0..b {
            for (&gv, &xv) in g[rows(bi)].iter().zip(&x[rows(bi)]) {
                sum_g += gv.f64();
                sum_gx += gv.f64() * (xv.f64() - mu) * is;
            }
        }
        gg[ch] = T::of(sum_gx);
        gb[ch] = T::of(sum_g);
        let gm = gamma[ch].f64();
        for bi in 0..b {
            for ((o, &gv), &xv) in gx[rows(bi)].iter_mut().zip(&g[rows(bi)]).zip(&x[rows(bi)]) {
                let v = if batch_mode {
                    let xh = (xv.f64() - mu) * is;
                    gm * is / m * (m * gv.f64() - sum_g - xh * sum_gx)
                } else {
                    gm * is * gv.f64()
                };
                *o = T::of(v);
            }
        }
    }
    NormGrads { x: gx, gamma: gg, beta: gb }
}
