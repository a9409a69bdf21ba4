//! Trilinear upsampling (cell-centred, edges clamped) and average pooling.

use crate::scalar::Scalar;

/// Source taps for one axis: `(i0, i1, weight of i1)` per output index.
fn linear_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn stretch_axis<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize, factor: usize) -> Vec<T> {
    let taps = linear_taps(n, factor);
    let m = n * factor;
    let mut out = vec![T::zero(); outer * m * inner];
    for o in 0..outer {
        let src = &x[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * m * inner..(o + 1) * m * inner];
        for (j, &(i0, i1, lam)) in taps.iter().enumerate() {
            let (a, b) = (T::of(1.0 - lam), T::of(lam));
            let row = &mut dst[j * inner..(j + 1) * inner];
            let (r0, r1) = (&src[i0 * inner..(i0 + 1) * inner], &src[i1 * inner..(i1 + 1) * inner]);
            for ((r, &u), &v) in row.iter_mut().zip(r0).zip(r1) {
                *r = a * u + b * v;
            }
        }
    }
    out
}

fn stretch_axis_grad<T: Scalar>(g: &[T], outer: usize, n: usize, inner: usize, factor: usize) -> Vec<T> {
    let taps = linear_taps(n, factor);
    let m = n * factor;
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let src = &g[o * m * inner..(o + 1) * m * inner];
        let dst = &mut out[o * n * inner..(o + 1) * n * inner];
        for (j, &(i0, i1, lam)) in taps.iter().enumerate() {
            let (a, b) = (T::of(1.0 - lam), T::of(lam));
            let row = &src[j * inner..(j + 1) * inner];
            for (t, &v) in row.iter().enumerate() {
                dst[i0 * inner + t] += a * v;
                dst[i1 * inner + t] += b * v;
            }
        }
    }
    out
}

/// `x` is `[bc, d, h, w]` flattened; returns `[bc, f·d, f·h, f·w]`.
pub fn upsample<T: Scalar>(x: &[T], bc: usize, d: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    if f == 1 {
        return x.to_vec();
    }
    let t = stretch_axis(x, bc * d * h, w, 1, f);
    let t = stretch_axis(&t, bc * d, h, w * f, f);
    stretch_axis(&t, bc, d, h * f * w * f, f)
}

pub fn upsample_grad<T: Scalar>(g: &[T], bc: usize, d: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    if f == 1 {
        return g.to_vec();
    }
    let t = stretch_axis_grad(g, bc, d, h * f * w * f, f);
    let t = stretch_axis_grad(&t, bc * d, h, w * f, f);
    stretch_axis_grad(&t, bc * d * h, w, 1, f)
}

/// Non-overlapping `s×s×s` mean pooling of `[bc, d, h, w]`.
pub fn avg_pool<T: Scalar>(x: &[T], bc: usize, d: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (od, oh, ow) = (d / s, h / s, w / s);
    let scale = T::of(1.0 / (s * s * s) as f64);
    let mut out = vec![T::zero(); bc * od * oh * ow];
    for c in 0..bc {
        for z in 0..d {
            for y in 0..h {
                let src = ((c * d + z) * h + y) * w;
                let dst = ((c * od + z / s) * oh + y / s) * ow;
                for xx in 0..w {
                    out[dst + xx / s] += x[src + xx];
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

pub fn avg_pool_grad<T: Scalar>(g: &[T], bc: usize, d: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (od, oh, ow) = (d / s, h / s, w / s);
    let scale = T::of(1.0 / (s * s * s) as f64);
    let mut out = vec![T::zero(); bc * d * h * w];
    for c in 0..bc {
        for z in 0..d {
            for y in 0..h {
                let dst = ((c * d + z) * h + y) * w;
                let src = ((c * od + z / s) * oh + y / s) * ow;
                for xx in 0..w {
                    out[dst + xx] = g[src + xx / s] * scale;
                }
            }
        }
    }
    out
}
