//! Voxel volumes, the PRVX file format and CT preprocessing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CROP: usize = 32;
pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 400.0;
/// Padding value for image regions outside the scan (air after normalization).
pub const PAD: f32 = -1.0;

const MAGIC: &[u8; 4] = b"PRVX";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 12 + 12 + 1;

/// A scalar volume in D-major order with per-axis spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

/// A binary mask on a 1 mm grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub extents: [usize; 3],
    pub data: Vec<u8>,
}

/// Whatever a PRVX file holds.
#[derive(Clone, Debug, PartialEq)]
pub enum Prvx {
    Image(Volume),
    Mask(Mask),
}

pub fn index(extents: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * extents[1] + y) * extents[2] + x
}

pub fn coords(extents: [usize; 3], i: usize) -> [usize; 3] {
    [i / (extents[1] * extents[2]), (i / extents[2]) % extents[1], i % extents[2]]
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != extents.iter().product::<usize>() {
            return Err(Error::Argument(format!("volume {extents:?} needs {} values, got {}", extents.iter().product::<usize>(), data.len())));
        }
        Ok(Volume { extents, spacing, data })
    }

    pub fn filled(extents: [usize; 3], value: f32) -> Self {
        Volume { extents, spacing: [1.0; 3], data: vec![value; extents.iter().product()] }
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[index(self.extents, z, y, x)]
    }
}

impl Mask {
    pub fn new(extents: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != extents.iter().product::<usize>() {
            return Err(Error::Argument(format!("mask {extents:?} needs {} values, got {}", extents.iter().product::<usize>(), data.len())));
        }
        Ok(Mask { extents, data })
    }

    pub fn empty(extents: [usize; 3]) -> Self {
        Mask { extents, data: vec![0; extents.iter().product()] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| (v != 0) as u8 as f32).collect()
    }
}

/// Maps Hounsfield units onto the 256-level grid `k/128 − 1`, clipping to
/// `[−1024, 400]` first so the result always lies in `[−1, 1)`.
pub fn normalize_hu_value(hu: f64) -> f32 {
    let hu = hu.clamp(HU_MIN, HU_MAX);
    let level = ((hu - HU_MIN) / (HU_MAX - HU_MIN) * 255.0).floor();
    (level / 128.0 - 1.0) as f32
}

pub fn normalize_hu(v: &Volume) -> Volume {
    Volume { extents: v.extents, spacing: v.spacing, data: v.data.iter().map(|&h| normalize_hu_value(h as f64)).collect() }
}

/// Linear interpolation taps for output sample `o` of an axis with `n`
/// input cells of width `spacing` mm, both grids cell-centred.
fn taps(o: usize, n: usize, spacing: f64) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / spacing - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, src - lo as f64)
}

/// Trilinear resampling onto a 1 mm grid with extents `round(extent·spacing)`.
pub fn resample_isotropic(v: &Volume) -> Result<Volume> {
    if v.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::format("<volume>", 0, format!("spacing must be positive, got {:?}", v.spacing)));
    }
    let out: [usize; 3] = std::array::from_fn(|a| ((v.extents[a] as f64 * v.spacing[a] as f64).round() as usize).max(1));
    let axis_taps: Vec<Vec<(usize, usize, f64)>> =
        (0..3).map(|a| (0..out[a]).map(|o| taps(o, v.extents[a], v.spacing[a] as f64)).collect()).collect();
    let mut data = Vec::with_capacity(out.iter().product());
    for &(z0, z1, tz) in &axis_taps[0] {
        for &(y0, y1, ty) in &axis_taps[1] {
            for &(x0, x1, tx) in &axis_taps[2] {
                let g = |z, y, x| v.at(z, y, x) as f64;
                let c00 = g(z0, y0, x0) * (1.0 - tx) + g(z0, y0, x1) * tx;
                let c01 = g(z0, y1, x0) * (1.0 - tx) + g(z0, y1, x1) * tx;
                let c10 = g(z1, y0, x0) * (1.0 - tx) + g(z1, y0, x1) * tx;
                let c11 = g(z1, y1, x0) * (1.0 - tx) + g(z1, y1, x1) * tx;
                let c0 = c00 * (1.0 - ty) + c01 * ty;
                let c1 = c10 * (1.0 - ty) + c11 * ty;
                data.push((c0 * (1.0 - tz) + c1 * tz) as f32);
            }
        }
    }
    Ok(Volume { extents: out, spacing: [1.0; 3], data })
}

/// A `size³` window whose voxel `size/2` sits on `center`; regions outside
/// the source are filled with [`PAD`].
pub fn crop_centered(v: &Volume, center: [usize; 3], size: usize) -> Result<Volume> {
    if (0..3).any(|a| center[a] >= v.extents[a]) {
        return Err(Error::Argument(format!("crop center {center:?} outside volume {:?}", v.extents)));
    }
    let start: [isize; 3] = std::array::from_fn(|a| center[a] as isize - (size / 2) as isize);
    let mut data = vec![PAD; size * size * size];
    for z in 0..size {
        let sz = start[0] + z as isize;
        if sz < 0 || sz >= v.extents[0] as isize {
            continue;
        }
        for y in 0..size {
            let sy = start[1] + y as isize;
            if sy < 0 || sy >= v.extents[1] as isize {
                continue;
            }
            for x in 0..size {
                let sx = start[2] + x as isize;
                if sx >= 0 && sx < v.extents[2] as isize {
                    data[(z * size + y) * size + x] = v.at(sz as usize, sy as usize, sx as usize);
                }
            }
        }
    }
    Ok(Volume { extents: [size; 3], spacing: v.spacing, data })
}

pub fn encode(item: &Prvx) -> Vec<u8> {
    let (extents, spacing, dtype) = match item {
        Prvx::Image(v) => (v.extents, v.spacing, 0u8),
        Prvx::Mask(m) => (m.extents, [1.0; 3], 1u8),
    };
    let mut out = Vec::with_capacity(HEADER + extents.iter().product::<usize>() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for e in extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(dtype);
    match item {
        Prvx::Image(v) => v.data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Prvx::Mask(m) => out.extend_from_slice(&m.data),
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Prvx> {
    let need = |offset: usize, len: usize| -> Result<&[u8]> {
        bytes.get(offset..offset + len).ok_or_else(|| Error::format(path, bytes.len() as u64, format!("truncated: needed {len} bytes at offset {offset}")))
    };
    if need(0, 4)? != MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected PRVX"));
    }
    let u32_at = |o: usize| -> Result<u32> { Ok(u32::from_le_bytes(need(o, 4)?.try_into().unwrap())) };
    let version = u32_at(4)?;
    if version != VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let extents = [u32_at(8)? as usize, u32_at(12)? as usize, u32_at(16)? as usize];
    let spacing: [f32; 3] = [0, 1, 2].map(|a| f32::from_le_bytes(bytes[20 + 4 * a..24 + 4 * a].try_into().unwrap()));
    let dtype = need(32, 1)?[0];
    let count: usize = extents.iter().product();
    let width = match dtype {
        0 => 4,
        1 => 1,
        d => return Err(Error::format(path, 32, format!("unknown dtype {d}"))),
    };
    let payload = need(HEADER, count * width)?;
    if bytes.len() != HEADER + count * width {
        return Err(Error::format(path, (HEADER + count * width) as u64, format!("payload is {} bytes, extents {extents:?} imply {}", bytes.len() - HEADER, count * width)));
    }
    Ok(match dtype {
        0 => Prvx::Image(Volume { extents, spacing, data: payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect() }),
        _ => Prvx::Mask(Mask { extents, data: payload.to_vec() }),
    })
}

pub fn read_prvx(path: impl AsRef<Path>) -> Result<Prvx> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_prvx(path: impl AsRef<Path>, item: &Prvx) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(item)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match read_prvx(path.as_ref())? {
        Prvx::Image(v) => Ok(v),
        Prvx::Mask(_) => Err(Error::format(path.as_ref(), 32, "expected an f32 volume, found a mask")),
    }
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    match read_prvx(path.as_ref())? {
        Prvx::Mask(m) => Ok(m),
        Prvx::Image(_) => Err(Error::format(path.as_ref(), 32, "expected a u8 mask, found an f32 volume")),
    }
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    write_prvx(path, &Prvx::Image(v.clone()))
}

pub fn write_mask(path: impl AsRef<Path>, m: &Mask) -> Result<()> {
    write_prvx(path, &Prvx::Mask(m.clone()))
}
