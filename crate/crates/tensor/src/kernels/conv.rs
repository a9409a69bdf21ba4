//! 3D cross-correlation with zero padding 1 (3×3×3) or no padding (1×1×1).
//!
//! The 3×3×3 case runs 27 strided GEMMs against a zero-padded copy of the
//! input. Computing on the padded grid turns every kernel tap into a constant
//! flat offset; rows that land on padding are discarded afterwards.

use crate::parallel::map_items;
use crate::scalar::{gemm, Scalar, Strided};

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }
}

#[derive(Clone, Copy)]
struct Padded {
    plane: usize,
    row: usize,
    vol: usize,
    len: usize,
}

impl Padded {
    fn new(g: &ConvGeom) -> Self {
        let (hp, wp) = (g.h + 2, g.w + 2);
        let plane = hp * wp;
        let vol = (g.d + 2) * plane;
        let q0 = plane + wp + 1;
        let q1 = g.d * plane + g.h * wp + g.w;
        Padded { plane, row: wp, vol, len: q1 - q0 + 1 }
    }

    /// Offset of the window origin for tap `(kz, ky, kx)`.
    fn tap_offset(&self, kz: usize, ky: usize, kx: usize) -> usize {
        kz * self.plane + ky * self.row + kx
    }

    /// Position of interior voxel `(z, y, x)` inside the computed range.
    fn range_index(&self, z: usize, y: usize, x: usize) -> usize {
        z * self.plane + y * self.row + x
    }

    fn padded_index(&self, z: usize, y: usize, x: usize) -> usize {
        (z + 1) * self.plane + (y + 1) * self.row + x + 1
    }
}

fn pad<T: Scalar>(g: &ConvGeom, p: &Padded, x: &[T], channels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels * p.vol];
    for c in 0..channels {
        for z in 0..g.d {
            for y in 0..g.h {
                let src = ((c * g.d + z) * g.h + y) * g.w;
                let dst = c * p.vol + p.padded_index(z, y, 0);
                out[dst..dst + g.w].copy_from_slice(&x[src..src + g.w]);
            }
        }
    }
    out
}

fn forward_item<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let s = g.spatial();
    let mut out = vec![T::zero(); g.cout * s];
    if g.k == 1 {
        gemm(g.cout, g.cin, s, w, Strided::rows(g.cin), x, Strided::rows(s), T::zero(), &mut out, Strided::rows(s));
    } else {
        let p = Padded::new(g);
        let xp = pad(g, &p, x, g.cin);
        let mut acc = vec![T::zero(); g.cout * p.len];
        let wl = Strided::new(0, g.cin * 27, 27);
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let tap = (kz * 3 + ky) * 3 + kx;
                    let beta = if tap == 0 { T::zero() } else { T::one() };
                    let xv = Strided::new(p.tap_offset(kz, ky, kx), p.vol, 1);
                    gemm(g.cout, g.cin, p.len, w, wl.at(tap), &xp, xv, beta, &mut acc, Strided::rows(p.len));
                }
            }
        }
        for co in 0..g.cout {
            for z in 0..g.d {
                for y in 0..g.h {
                    let src = co * p.len + p.range_index(z, y, 0);
                    let dst = ((co * g.d + z) * g.h + y) * g.w;
                    out[dst..dst + g.w].copy_from_slice(&acc[src..src + g.w]);
                }
            }
        }
    }
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(s).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    out
}

pub fn forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let xs = g.cin * g.spatial();
    let items = map_items(g.batch, |b| forward_item(g, &x[b * xs..(b + 1) * xs], w, bias));
    items.concat()
}

pub struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Vec<T>,
    pub bias: Vec<T>,
}

fn backward_item<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], gy: &[T], need_x: bool) -> ConvGrads<T> {
    let s = g.spatial();
    let mut gw = vec![T::zero(); g.cout * g.cin * g.taps()];
    let gb: Vec<T> = gy.chunks(s).map(|c| c.iter().copied().sum()).collect();
    if g.k == 1 {
        gemm(g.cout, s, g.cin, gy, Strided::rows(s), x, Strided::new(0, 1, s), T::zero(), &mut gw, Strided::rows(g.cin));
        let gx = need_x.then(|| {
            let mut gx = vec![T::zero(); g.cin * s];
            gemm(g.cin, g.cout, s, w, Strided::new(0, 1, g.cin), gy, Strided::rows(s), T::zero(), &mut gx, Strided::rows(s));
            gx
        });
        return ConvGrads { x: gx, w: gw, bias: gb };
    }

    let p = Padded::new(g);
    let xp = pad(g, &p, x, g.cin);
    let mut gr = vec![T::zero(); g.cout * p.len];
    for co in 0..g.cout {
        for z in 0..g.d {
            for y in 0..g.h {
                let src = ((co * g.d + z) * g.h + y) * g.w;
                let dst = co * p.len + p.range_index(z, y, 0);
                gr[dst..dst + g.w].copy_from_slice(&gy[src..src + g.w]);
            }
        }
    }
    let wl = Strided::new(0, g.cin * 27, 27);
    let mut gxp = need_x.then(|| vec![T::zero(); g.cin * p.vol]);
    for kz in 0..3 {
        for ky in 0..3 {
            for kx in 0..3 {
                let tap = (kz * 3 + ky) * 3 + kx;
                let off = p.tap_offset(kz, ky, kx);
                let xv = Strided::new(off, 1, p.vol);
                gemm(g.cout, p.len, g.cin, &gr, Strided::rows(p.len), &xp, xv, T::zero(), &mut gw, wl.at(tap));
                if let Some(gxp) = gxp.as_mut() {
                    gemm(
                        g.cin,
                        g.cout,
                        p.len,
                        w,
                        wl.at(tap).transposed(),
                        &gr,
                        Strided::rows(p.len),
                        T::one(),
                        gxp,
                        Strided::new(off, p.vol, 1),
                    );
                }
            }
        }
    }
    let gx = gxp.map(|gxp| {
        let mut gx = vec![T::zero(); g.cin * s];
        for c in 0..g.cin {
            for z in 0..g.d {
                for y in 0..g.h {
                    let src = c * p.vol + p.padded_index(z, y, 0);
                    let dst = ((c * g.d + z) * g.h + y) * g.w;
                    gx[dst..dst + g.w].copy_from_slice(&gxp[src..src + g.w]);
                }
            }
        }
        gx
    });
    ConvGrads { x: gx, w: gw, bias: gb }
}

/// Gradients for input (if `need_x`), weights and bias. Per-item weight and
/// bias gradients are summed in batch order.
pub fn backward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], gy: &[T], need_x: bool) -> ConvGrads<T> {
    let xs = g.cin * g.spatial();
    let ys = g.cout * g.spatial();
    let items = map_items(g.batch, |b| {
        backward_item(g, &x[b * xs..(b + 1) * xs], w, &gy[b * ys..(b + 1) * ys], need_x)
    });
    let mut items = items.into_iter();
    let first = items.next().expect("batch >= 1");
    let mut gx = first.x.map(|v| {
        let mut all = Vec::with_capacity(xs * g.batch);
        all.extend(v);
        all
    });
    let (mut gw, mut gb) = (first.w, first.bias);
    for it in items {
        if let (Some(all), Some(v)) = (gx.as_mut(), it.x) {
            all.extend(v);
        }
        gw.iter_mut().zip(&it.w).for_each(|(a, &b)| *a += b);
        gb.iter_mut().zip(&it.bias).for_each(|(a, &b)| *a += b);
    }
    ConvGrads { x: gx, w: gw, bias: gb }
}
