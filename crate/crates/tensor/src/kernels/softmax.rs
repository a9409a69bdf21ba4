use crate::scalar::Scalar;

/// Max-subtracted softmax along the middle axis of `(outer, n, inner)`.
pub fn forward<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    if inner == 1 {
        for (xr, yr) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
            row_forward(xr, yr);
        }
        return y;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let m = (0..n).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..n {
                let d = x[at(j)] - m;
                let e = if d < T::of(T::SOFTMAX_FLOOR) { T::zero() } else { d.exp_bulk() };
                y[at(j)] = e;
                z += e;
            }
            for j in 0..n {
                y[at(j)] /= z;
            }
        }
    }
    y
}

/// `dx = y ⊙ (g − Σ g⊙y)` along the softmax axis.
pub fn backward<T: Scalar>(y: &[T], g: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    if inner == 1 {
        for ((yr, gr), xr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
            let dot = lane_dot(yr, gr);
            for ((o, &a), &b) in xr.iter_mut().zip(yr).zip(gr) {
                *o = a * (b - dot);
            }
        }
        return gx;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
            for j in 0..n {
                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    gx
}

const LANES: usize = 8;

/// Contiguous-row softmax. Reductions run over fixed lanes so they
/// vectorize while keeping one deterministic summation order.
fn row_forward<T: Scalar>(x: &[T], y: &mut [T]) {
    y.copy_from_slice(x);
    row_in_place(y);
}

/// Softmax of each length-`n` row of `s`, in place.
pub fn forward_rows_in_place<T: Scalar>(s: &mut [T], n: usize) {
    s.chunks_exact_mut(n).for_each(row_in_place);
}

fn row_in_place<T: Scalar>(y: &mut [T]) {
    let x = &*y;
    let mut lanes = [T::neg_infinity(); LANES];
    let mut chunks = x.chunks_exact(LANES);
    for c in &mut chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l = if v > *l { v } else { *l };
        }
    }
    let m = chunks.remainder().iter().chain(&lanes).copied().fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let floor = T::of(T::SOFTMAX_FLOOR);
    y.iter_mut().for_each(|v| {
        let d = *v - m;
        *v = if d < floor { T::zero() } else { d.exp_bulk() };
    });
    let z = lane_sum(y);
    let inv = T::one() / z;
    y.iter_mut().for_each(|v| *v *= inv);
}

pub(crate) fn lane_sum<T: Scalar>(v: &[T]) -> T {
    let mut lanes = [T::zero(); LANES];
    let mut chunks = v.chunks_exact(LANES);
    for c in &mut chunks {
        for (l, &e) in lanes.iter_mut().zip(c) {
            *l += e;
        }
    }
    lanes.iter().chain(chunks.remainder()).copied().fold(T::zero(), |a, b| a + b)
}

pub(crate) fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..LANES {
            lanes[i] += x[i] * y[i];
        }
    }
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
    lanes.iter().copied().fold(T::zero(), |acc, l| acc + l) + tail
}
