//! Fused `softmax(X Xᵀ / √c) · ELU(X)` for one head.
//!
//! The `n×n` weight matrix is never materialized. Both passes walk row
//! blocks small enough to stay in cache, and the backward pass recomputes
//! each block of weights instead of storing them.

use super::softmax;
use crate::scalar::{gemm, Scalar, Strided};

const BLOCK: usize = 64;

pub fn elu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

/// Attention weights for rows `r0..r0+rows`, written to `s` (`rows×n`).
fn block_weights<T: Scalar>(x: &[T], n: usize, c: usize, r0: usize, rows: usize, s: &mut [T]) {
    gemm(rows, c, n, x, Strided::rows(c).at(r0 * c), x, Strided::new(0, 1, c), T::zero(), s, Strided::rows(n));
    let scale = T::of(1.0 / (c as f64).sqrt());
    s.iter_mut().for_each(|v| *v *= scale);
    softmax::forward_rows_in_place(s, n);
}

/// Row-stochastic attention weights `softmax(X Xᵀ / √c)`, `n×n`.
pub fn weights<T: Scalar>(x: &[T], n: usize, c: usize) -> Vec<T> {
    let mut p = vec![T::zero(); n * n];
    for r0 in (0..n).step_by(BLOCK) {
        let rows = BLOCK.min(n - r0);
        block_weights(x, n, c, r0, rows, &mut p[r0 * n..(r0 + rows) * n]);
    }
    p
}

pub fn forward<T: Scalar>(x: &[T], n: usize, c: usize) -> Vec<T> {
    let e: Vec<T> = x.iter().map(|&v| elu(v)).collect();
    let mut y = vec![T::zero(); n * c];
    let mut p = vec![T::zero(); BLOCK.min(n) * n];
    for r0 in (0..n).step_by(BLOCK) {
        let rows = BLOCK.min(n - r0);
        let pb = &mut p[..rows * n];
        block_weights(x, n, c, r0, rows, pb);
        gemm(rows, n, c, pb, Strided::rows(n), &e, Strided::rows(c), T::zero(), &mut y[r0 * c..], Strided::rows(c));
    }
    y
}

/// Gradient w.r.t. `x` given the forward output `y` and upstream `g`.
pub fn backward<T: Scalar>(x: &[T], y: &[T], g: &[T], n: usize, c: usize) -> Vec<T> {
    let e: Vec<T> = x.iter().map(|&v| elu(v)).collect();
    let scale = T::of(1.0 / (c as f64).sqrt());
    let mut de = vec![T::zero(); n * c];
    let mut gx = vec![T::zero(); n * c];
    let mut p = vec![T::zero(); BLOCK.min(n) * n];
    let mut ds = vec![T::zero(); BLOCK.min(n) * n];
    for r0 in (0..n).step_by(BLOCK) {
        let rows = BLOCK.min(n - r0);
        let pb = &mut p[..rows * n];
        let db = &mut ds[..rows * n];
        block_weights(x, n, c, r0, rows, pb);
        // dP = G Eᵀ for this block.
        gemm(rows, c, n, g, Strided::rows(c).at(r0 * c), &e, Strided::new(0, 1, c), T::zero(), db, Strided::rows(n));
        // Softmax backward; Σ_j dP_ij P_ij equals G_i · Y_i.
        for i in 0..rows {
            let gi = &g[(r0 + i) * c..(r0 + i + 1) * c];
            let yi = &y[(r0 + i) * c..(r0 + i + 1) * c];
            let dot = gi.iter().zip(yi).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            for (d, &pv) in db[i * n..(i + 1) * n].iter_mut().zip(&pb[i * n..(i + 1) * n]) {
                *d = pv * (*d - dot) * scale;
            }
        }
        // dE += Pᵀ G
        gemm(n, rows, c, pb, Strided::new(0, 1, n), g, Strided::rows(c).at(r0 * c), T::one(), &mut de, Strided::rows(c));
        // dX_block += dS X and dX += dSᵀ X_block
        gemm(rows, n, c, db, Strided::rows(n), x, Strided::rows(c), T::one(), &mut gx[r0 * c..], Strided::rows(c));
        gemm(n, rows, c, db, Strided::new(0, 1, n), x, Strided::rows(c).at(r0 * c), T::one(), &mut gx, Strided::rows(c));
    }
    for ((o, &d), &xv) in gx.iter_mut().zip(&de).zip(x) {
        *o += d * elu_grad(xv);
    }
    gx
}
