//! Synthetic multi-rater nodule cohort and the on-disk manifest.
//!
//! Each nodule has a latent malignancy score `s ∈ [0, 1]`. Low scores give
//! smooth ellipsoids, high scores give lobulated bodies with spikes, and the
//! lesion density rises with `s`. Four simulated raters each see `s` through
//! Gaussian noise scaled by the ambiguity level and draw their own mask by
//! eroding or dilating the true shape by one voxel.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use fcdx_tensor::{Stream, StreamKey};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{self, crop_centered, normalize_hu, read_mask, read_volume, Mask, Volume, CROP};

pub const RATERS: usize = 4;
pub const FOLDS: usize = 5;
pub const MANIFEST: &str = "manifest.jsonl";
pub const COHORT_CFG: &str = "cohort.cfg";

/// Side of the simulated scan region the crop is cut from.
const SCAN: usize = 40;
const BACKGROUND_HU: f64 = -850.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub rater: usize,
    pub rating: u8,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoduleRecord {
    pub id: String,
    pub crop: Volume,
    pub annotations: Vec<Annotation>,
    pub fold: usize,
}

impl NoduleRecord {
    pub fn mean_rating(&self) -> f64 {
        self.annotations.iter().map(|a| a.rating as f64).sum::<f64>() / self.annotations.len() as f64
    }

    /// Benign (`false`) when the mean rating is below 3, malignant above,
    /// `None` for an exact 3.
    pub fn binary_label(&self) -> Option<bool> {
        let twice: u32 = self.annotations.iter().map(|a| a.rating as u32).sum();
        let n = self.annotations.len() as u32;
        match twice.cmp(&(3 * n)) {
            std::cmp::Ordering::Less => Some(false),
            std::cmp::Ordering::Greater => Some(true),
            std::cmp::Ordering::Equal => None,
        }
    }

    /// The consensus filter: at least three annotations and a mean rating
    /// other than 3.
    pub fn is_low_ambiguity(&self) -> bool {
        self.annotations.len() >= 3 && self.binary_label().is_some()
    }

    /// Most frequent rating, ties resolved toward the lower rating.
    pub fn consensus_rating(&self) -> u8 {
        let mut counts = [0usize; 6];
        for a in &self.annotations {
            counts[a.rating as usize] += 1;
        }
        (1..=5u8).max_by_key(|&r| (counts[r as usize], std::cmp::Reverse(r))).unwrap()
    }

    /// Voxels marked by at least half of the raters.
    pub fn consensus_mask(&self) -> Mask {
        let n = self.annotations.len();
        let extents = self.annotations[0].mask.extents;
        let data = (0..self.annotations[0].mask.data.len())
            .map(|i| {
                let votes = self.annotations.iter().filter(|a| a.mask.data[i] != 0).count();
                (2 * votes >= n) as u8
            })
            .collect();
        Mask { extents, data }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub rater: usize,
    pub rating: u8,
    pub mask_path: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub crop_path: String,
    pub fold: usize,
    pub annotations: Vec<AnnotationEntry>,
}

/// Parsed `manifest.jsonl`; paths inside are relative to `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub ambiguity: Option<f64>,
    pub seed: Option<u64>,
}

impl Manifest {
    /// Loads `dir/manifest.jsonl` (and `dir/cohort.cfg` when present).
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let path = root.join(MANIFEST);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if !line.trim().is_empty() {
                let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::format(&path, offset, e.to_string()))?;
                entries.push(entry);
            }
            offset += line.len() as u64 + 1;
        }
        let mut ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("duplicate record id {}", w[0])));
        }
        for e in &entries {
            if e.annotations.is_empty() {
                return Err(Error::Data(format!("record {} has no annotations", e.id)));
            }
            if e.fold >= FOLDS {
                return Err(Error::Data(format!("record {} has fold {}", e.id, e.fold)));
            }
            if let Some(a) = e.annotations.iter().find(|a| !(1..=5).contains(&a.rating)) {
                return Err(Error::Data(format!("record {} has rating {}", e.id, a.rating)));
            }
        }
        let (mut ambiguity, mut seed) = (None, None);
        let cfg = root.join(COHORT_CFG);
        if cfg.exists() {
            let text = fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
            for (k, v) in text.lines().filter_map(|l| l.split_once('=')) {
                match k.trim() {
                    "ambiguity" => ambiguity = v.trim().parse().ok(),
                    "seed" => seed = v.trim().parse().ok(),
                    _ => {}
                }
            }
        }
        Ok(Manifest { root, entries, ambiguity, seed })
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(MANIFEST);
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        if let (Some(a), Some(s)) = (self.ambiguity, self.seed) {
            let cfg = self.root.join(COHORT_CFG);
            let mut f = fs::File::create(&cfg).map_err(|e| Error::io(&cfg, e))?;
            writeln!(f, "n={}\nambiguity={a}\nseed={s}", self.entries.len()).map_err(|e| Error::io(&cfg, e))?;
        }
        Ok(())
    }

    /// Every referenced file must exist; the error lists offending ids.
    pub fn validate(&self) -> Result<()> {
        let ids: Vec<String> = self
            .entries
            .iter()
            .filter(|e| {
                !self.root.join(&e.crop_path).is_file() || e.annotations.iter().any(|a| !self.root.join(&a.mask_path).is_file())
            })
            .map(|e| e.id.clone())
            .collect();
        if ids.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation { ids })
        }
    }

    pub fn load_record(&self, entry: &ManifestEntry) -> Result<NoduleRecord> {
        let crop = read_volume(self.root.join(&entry.crop_path))?;
        if crop.extents != [CROP; 3] {
            return Err(Error::Data(format!("record {}: crop extents {:?}, expected {CROP}³", entry.id, crop.extents)));
        }
        let mut annotations = Vec::with_capacity(entry.annotations.len());
        for a in &entry.annotations {
            let mask = read_mask(self.root.join(&a.mask_path))?;
            if mask.extents != crop.extents {
                return Err(Error::Data(format!("record {}: mask of rater {} has extents {:?}", entry.id, a.rater, mask.extents)));
            }
            if mask.count() == 0 {
                return Err(Error::Data(format!("record {}: mask of rater {} is empty", entry.id, a.rater)));
            }
            annotations.push(Annotation { rater: a.rater, rating: a.rating, mask });
        }
        Ok(NoduleRecord { id: entry.id.clone(), crop, annotations, fold: entry.fold })
    }

    pub fn load_records(&self) -> Result<Vec<NoduleRecord>> {
        self.validate()?;
        self.entries.iter().map(|e| self.load_record(e)).collect()
    }
}

/// A generated nodule before it is written to disk.
#[derive(Clone, Debug)]
pub struct SyntheticNodule {
    pub record: NoduleRecord,
    pub latent: f64,
    pub truth: Mask,
    pub radius: f64,
}

fn unit_vector(s: &mut Stream) -> [f64; 3] {
    loop {
        let v = [s.normal(), s.normal(), s.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// White noise blurred by three box passes per axis, rescaled to unit std.
fn smooth_noise(extents: [usize; 3], s: &mut Stream) -> Vec<f64> {
    let mut v: Vec<f64> = (0..extents.iter().product::<usize>()).map(|_| s.normal()).collect();
    let strides = [extents[1] * extents[2], extents[2], 1];
    for axis in 0..3 {
        for _ in 0..3 {
            let prev = v.clone();
            for (i, out) in v.iter_mut().enumerate() {
                let c = volume::coords(extents, i)[axis];
                let mut acc = prev[i];
                let mut n = 1.0;
                if c > 0 {
                    acc += prev[i - strides[axis]];
                    n += 1.0;
                }
                if c + 1 < extents[axis] {
                    acc += prev[i + strides[axis]];
                    n += 1.0;
                }
                *out = acc / n;
            }
        }
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt();
    v.iter().map(|x| (x - mean) / std).collect()
}

/// One 6-connected erosion (`radius < 0`) or dilation (`radius > 0`) step
/// per unit of `radius`.
pub fn morph(mask: &Mask, radius: i32) -> Mask {
    let e = mask.extents;
    let mut cur = mask.clone();
    for _ in 0..radius.unsigned_abs() {
        let prev = cur.clone();
        for i in 0..prev.data.len() {
            let [z, y, x] = volume::coords(e, i);
            let mut any = prev.data[i] != 0;
            let mut all = any;
            let mut visit = |zz: isize, yy: isize, xx: isize| {
                let inside = zz >= 0 && yy >= 0 && xx >= 0 && (zz as usize) < e[0] && (yy as usize) < e[1] && (xx as usize) < e[2];
                let v = inside && prev.data[volume::index(e, zz as usize, yy as usize, xx as usize)] != 0;
                any |= v;
                all &= v;
            };
            let (z, y, x) = (z as isize, y as isize, x as isize);
            for (dz, dy, dx) in [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)] {
                visit(z + dz, y + dy, x + dx);
            }
            cur.data[i] = if radius > 0 { any } else { all } as u8;
        }
    }
    cur
}

/// Builds nodule `index` of a cohort; the result depends only on
/// `(seed, index, ambiguity)`.
pub fn synthesize(seed: u64, index: usize, ambiguity: f64) -> SyntheticNodule {
    let key = StreamKey::root(seed).child("cohort").index(index as u64);
    let mut shape = key.child("shape").stream();
    let s = shape.uniform();
    let radius = 5.0 + 1.0 * s + 1.0 * shape.uniform();
    let axes: [f64; 3] = std::array::from_fn(|_| radius * (1.0 + 0.12 * shape.uniform_range(-1.0, 1.0)));
    let centre: [f64; 3] = std::array::from_fn(|_| (SCAN / 2) as f64 + shape.below(3) as f64 - 1.0);

    let lobes: Vec<([f64; 3], f64, f64)> = (0..3).map(|_| (unit_vector(&mut shape), 2.0 + shape.below(3) as f64, shape.uniform_range(0.0, 6.283))).collect();
    let lobe_amp = 0.22 * s;
    let spike_count = (8.0 * s).round() as usize;
    let spikes: Vec<([f64; 3], f64)> =
        (0..spike_count).map(|_| (unit_vector(&mut shape), (0.35 + 0.35 * shape.uniform()) * (0.5 + 0.5 * s))).collect();
    let spike_width = 0.22;

    let grid = [SCAN; 3];
    let mut truth = Mask::empty(grid);
    for (i, t) in truth.data.iter_mut().enumerate() {
        let c = volume::coords(grid, i);
        let d: [f64; 3] = std::array::from_fn(|a| c[a] as f64 - centre[a]);
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let rho = ((d[0] / axes[0]).powi(2) + (d[1] / axes[1]).powi(2) + (d[2] / axes[2]).powi(2)).sqrt();
        if norm < 1e-9 {
            *t = 1;
            continue;
        }
        let dir = [d[0] / norm, d[1] / norm, d[2] / norm];
        let dot = |v: &[f64; 3]| (dir[0] * v[0] + dir[1] * v[1] + dir[2] * v[2]).clamp(-1.0, 1.0);
        let lob: f64 = lobes.iter().map(|(v, f, p)| (f * dot(v).acos() + p).cos()).sum::<f64>() * lobe_amp / 3.0;
        let spike = spikes.iter().map(|(v, len)| len * (1.0 - dot(v).acos() / spike_width).max(0.0)).fold(0.0, f64::max);
        *t = (rho <= 1.0 + lob + spike) as u8;
    }

    let mut texture = key.child("texture").stream();
    let background = smooth_noise(grid, &mut texture);
    let grain = smooth_noise(grid, &mut texture);
    let lesion_hu = -150.0 + 200.0 * s;
    let hu: Vec<f32> = (0..truth.data.len())
        .map(|i| {
            let v = if truth.data[i] != 0 { lesion_hu + 30.0 * grain[i] } else { BACKGROUND_HU + 40.0 * background[i] };
            v.round() as f32
        })
        .collect();
    let scan = Volume { extents: grid, spacing: [1.0; 3], data: hu };
    let centre_voxel = [SCAN / 2; 3];
    let crop = normalize_hu(&crop_centered(&scan, centre_voxel, CROP).expect("centre lies inside the scan"));
    let truth_crop = {
        let as_volume = Volume { extents: grid, spacing: [1.0; 3], data: truth.as_f32() };
        let c = crop_centered(&as_volume, centre_voxel, CROP).expect("centre lies inside the scan");
        Mask { extents: c.extents, data: c.data.iter().map(|&v| (v > 0.5) as u8).collect() }
    };

    let mut raters = key.child("raters").stream();
    let base = -(raters.bernoulli(0.5) as i32);
    let id = format!("nod{index:04}");
    let annotations = (0..RATERS)
        .map(|r| {
            let eps = ambiguity * 0.25 * raters.normal();
            let rating = (1.0 + 4.0 * (s + eps)).round().clamp(1.0, 5.0) as u8;
            let jitter = base + raters.bernoulli(0.5) as i32;
            let mut mask = morph(&truth_crop, jitter);
            if mask.count() == 0 {
                mask = truth_crop.clone();
            }
            Annotation { rater: r, rating, mask }
        })
        .collect();
    SyntheticNodule { record: NoduleRecord { id, crop, annotations, fold: index % FOLDS }, latent: s, truth: truth_crop, radius }
}

/// Writes `n` nodules plus `manifest.jsonl` and `cohort.cfg` under `out`.
pub fn generate_cohort(out: impl AsRef<Path>, n: usize, ambiguity: f64, seed: u64) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Argument("cohort size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&ambiguity) {
        return Err(Error::Argument(format!("ambiguity must lie in [0, 1], got {ambiguity}")));
    }
    let root = out.as_ref().to_path_buf();
    for sub in ["crops", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let nodules = fcdx_tensor::parallel::map_items(n, |i| synthesize(seed, i, ambiguity));
    let mut entries = Vec::with_capacity(n);
    for nod in nodules {
        let rec = nod.record;
        let crop_path = format!("crops/{}.prvx", rec.id);
        volume::write_volume(root.join(&crop_path), &rec.crop)?;
        let mut annotations = Vec::new();
        for a in &rec.annotations {
            let mask_path = format!("masks/{}_r{}.prvx", rec.id, a.rater);
            volume::write_mask(root.join(&mask_path), &a.mask)?;
            annotations.push(AnnotationEntry { rater: a.rater, rating: a.rating, mask_path });
        }
        entries.push(ManifestEntry { id: rec.id, crop_path, fold: rec.fold, annotations });
    }
    let manifest = Manifest { root, entries, ambiguity: Some(ambiguity), seed: Some(seed) };
    manifest.save()?;
    Ok(manifest)
}

/// Per-fold counts and the rating histogram, for the generator summary.
pub fn summary(records: &[NoduleRecord]) -> String {
    let mut folds = [0usize; FOLDS];
    let mut hist = [0usize; 5];
    let mut disagree = 0;
    for r in records {
        folds[r.fold] += 1;
        for a in &r.annotations {
            hist[a.rating as usize - 1] += 1;
        }
        if r.annotations.iter().any(|a| a.rating != r.annotations[0].rating) {
            disagree += 1;
        }
    }
    format!("records={} folds={folds:?} ratings[1..5]={hist:?} records_with_disagreement={disagree}", records.len())
}
