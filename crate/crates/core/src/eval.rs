//! Sampling-based inference, fold-wise evaluation and CAM export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fcdx_tensor::{parallel, Scalar, Stream, StreamKey, Tape, Tensor, Var};
use serde::Serialize;

use crate::cloud::{extract_predicted, CloudExtraction, FeatureCloud};
use crate::cohort::{NoduleRecord, FOLDS};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_binary, auc, dice_coefficient, diversity, softmax5, Histogram};
use crate::model::Model;
use crate::prior::{draw_noise, reparameterize};
use crate::train::{TrainConfig, FINAL, RUN_CFG};
use crate::volume::Volume;

pub const DEFAULT_SAMPLES: usize = 10;

/// Result of sampling the prior `N` times for one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosisOutput {
    /// Raw logits and full softmax rows, one per prior sample; empty when refused.
    pub per_sample_logits: Vec<[f64; 5]>,
    pub per_sample_probs: Vec<[f64; 5]>,
    pub p_binary: Option<(f64, f64)>,
    pub div: Option<f64>,
    pub refused: bool,
    /// Soft volume of the mean segmentation.
    pub volume: f64,
    /// Mean sigmoid over the samples.
    pub seg_mean: Vec<f32>,
    pub cloud: Option<FeatureCloud>,
}

impl DiagnosisOutput {
    pub fn to_json(&self) -> serde_json::Value {
        let (pb, pm) = self.p_binary.map_or((None, None), |(b, m)| (Some(b), Some(m)));
        serde_json::json!({ "p_b": pb, "p_m": pm, "div": self.div, "refused": self.refused })
    }
}

struct Encoded {
    tape: Tape<f32>,
    cls_features: Var,
    seg_features: Var,
    mu: Var,
    log_var: Var,
}

fn encode(model: &Model<f32>, crop: &Volume) -> Result<Encoded> {
    let mut tape = Tape::new();
    let x = tape.constant(model.input(&[crop])?);
    let bb = model.backbone.forward(&mut tape, &model.store, x)?;
    let (mu, log_var) = model.prior.forward(&mut tape, &model.store, x)?;
    Ok(Encoded { tape, cls_features: bb.cls_features, seg_features: bb.seg_features, mu, log_var })
}

/// Backbone and prior once, then the segmentation head for each of
/// `n_samples` prior draws; refusal and the cloud come from the mean
/// segmentation, the attention stack runs once and the classification head
/// once per draw.
pub fn infer(model: &Model<f32>, crop: &Volume, n_samples: usize, stream: &mut Stream) -> Result<DiagnosisOutput> {
    if n_samples == 0 {
        return Err(Error::Argument("n_samples must be at least 1".into()));
    }
    let Encoded { mut tape, cls_features, seg_features, mu, log_var } = encode(model, crop)?;
    let cfg = &model.config;
    let mut fs = Vec::with_capacity(n_samples);
    let mut seg_sum = vec![0.0f64; cfg.input.pow(3)];
    for _ in 0..n_samples {
        let noise = draw_noise(1, cfg.latent, stream);
        let f = reparameterize(&mut tape, mu, log_var, noise)?;
        let logits = model.heads.segment(&mut tape, &model.store, seg_features, f)?;
        let p = tape.sigmoid(logits);
        seg_sum.iter_mut().zip(tape.value(p).data()).for_each(|(s, &v)| *s += v as f64);
        fs.push(f);
    }
    let seg_mean: Vec<f32> = seg_sum.iter().map(|&s| (s / n_samples as f64) as f32).collect();
    let extraction = extract_predicted(&seg_mean, [cfg.input; 3], cfg.max_points, cfg.refusal_volume)?;
    let Some(cloud) = extraction.cloud().cloned() else {
        return Ok(DiagnosisOutput {
            per_sample_logits: Vec::new(),
            per_sample_probs: Vec::new(),
            p_binary: None,
            div: None,
            refused: true,
            volume: extraction.volume,
            seg_mean,
            cloud: None,
        });
    };
    let pts = cloud.gather(&mut tape, cls_features, 0)?;
    let rep = model.nsam.forward(&mut tape, &model.store, pts)?;
    let mut logits = Vec::with_capacity(n_samples);
    for f in fs {
        let l = model.heads.classify(&mut tape, &model.store, rep, f)?;
        let v = tape.value(l).data();
        logits.push([0, 1, 2, 3, 4].map(|k| v[k] as f64));
    }
    let probs: Vec<[f64; 5]> = logits.iter().map(softmax5).collect();
    Ok(DiagnosisOutput {
        p_binary: Some(aggregate_binary(&logits)),
        div: Some(diversity(&probs)),
        per_sample_logits: logits,
        per_sample_probs: probs,
        refused: false,
        volume: extraction.volume,
        seg_mean,
        cloud: Some(cloud),
    })
}

/// Per-voxel malignancy evidence for one prior sample `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    /// `p4 + p5` of the pointwise head at cloud voxels, 0 elsewhere.
    pub map: Volume,
    pub extraction: CloudExtraction,
}

/// Applies the post-attention MLP and the classification head to every
/// cloud point instead of the pooled vector.
pub fn export_cam(model: &Model<f32>, crop: &Volume, f: &[f64]) -> Result<CamMap> {
    let cfg = &model.config;
    if f.len() != cfg.latent {
        return Err(Error::Argument(format!("prior sample of length {} for latent size {}", f.len(), cfg.latent)));
    }
    let Encoded { mut tape, cls_features, seg_features, .. } = encode(model, crop)?;
    let fv = tape.constant(Tensor::new(&[1, cfg.latent], f.iter().map(|&v| v as f32).collect())?);
    let seg = model.heads.segment(&mut tape, &model.store, seg_features, fv)?;
    let p = tape.sigmoid(seg);
    let extraction = extract_predicted(tape.value(p).data(), [cfg.input; 3], cfg.max_points, cfg.refusal_volume)?;
    let mut map = Volume::filled([cfg.input; 3], 0.0);
    if let Some(cloud) = extraction.cloud() {
        let pts = cloud.gather(&mut tape, cls_features, 0)?;
        let pts = model.nsam.points(&mut tape, &model.store, pts)?;
        let h = model.nsam.mlp(&mut tape, &model.store, pts)?;
        let n = cloud.len();
        let rows = Tensor::from_fn(&[n, cfg.latent], |i| f[i % cfg.latent] as f32);
        let fs = tape.constant(rows);
        let l = model.heads.classify(&mut tape, &model.store, h, fs)?;
        let v = tape.value(l).data();
        for (r, &idx) in cloud.indices.iter().enumerate() {
            let p = softmax5(&[0, 1, 2, 3, 4].map(|k| v[r * 5 + k] as f64));
            map.data[idx] = (p[3] + p[4]) as f32;
        }
    }
    Ok(CamMap { map, extraction })
}

/// The prior mean for `crop`, the natural sample for a single CAM.
pub fn prior_mean(model: &Model<f32>, crop: &Volume) -> Result<Vec<f64>> {
    let e = encode(model, crop)?;
    Ok(e.tape.value(e.mu).data().iter().map(|v| v.f64()).collect())
}

/// One evaluated record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordRow {
    pub id: String,
    pub fold: usize,
    /// Malignant when the mean rating is above 3.
    pub label: bool,
    pub p_b: Option<f64>,
    pub p_m: Option<f64>,
    pub div: Option<f64>,
    pub refused: bool,
    /// Against one uniformly chosen expert mask; absent when refused.
    pub dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramJson {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    pub records: usize,
    /// Absent when no classified record or only one class remains.
    pub auc: Option<f64>,
    /// Percent correct at `p_m > 0.5`.
    pub accuracy: Option<f64>,
    pub mean_dice: Option<f64>,
    pub refusals: usize,
    pub div_histogram: HistogramJson,
}

impl EvalReport {
    pub fn from_rows(rows: &[RecordRow], fold: Option<usize>) -> Self {
        let kept: Vec<&RecordRow> = rows.iter().filter(|r| !r.refused).collect();
        let scores: Vec<f64> = kept.iter().map(|r| r.p_m.unwrap()).collect();
        let labels: Vec<bool> = kept.iter().map(|r| r.label).collect();
        let correct = kept.iter().filter(|r| (r.p_m.unwrap() > 0.5) == r.label).count();
        let mut hist = Histogram::diversity();
        kept.iter().for_each(|r| hist.add(r.div.unwrap()));
        let n = kept.len() as f64;
        EvalReport {
            fold,
            records: rows.len(),
            auc: auc(&scores, &labels),
            accuracy: (!kept.is_empty()).then(|| 100.0 * correct as f64 / n),
            mean_dice: (!kept.is_empty()).then(|| kept.iter().map(|r| r.dice.unwrap()).sum::<f64>() / n),
            refusals: rows.len() - kept.len(),
            div_histogram: HistogramJson { edges: hist.edges, counts: hist.counts },
        }
    }
}

/// Key of the per-record evaluation streams.
pub fn eval_key(seed: u64, id: &str) -> StreamKey {
    StreamKey::root(seed).child("eval").child(id)
}

/// Records with a binary label (mean rating other than 3).
pub fn evaluable<'a>(records: impl IntoIterator<Item = &'a NoduleRecord>) -> Vec<&'a NoduleRecord> {
    records.into_iter().filter(|r| r.binary_label().is_some()).collect()
}

/// Runs [`infer`] on every evaluable record with per-record streams.
pub fn evaluate_records(model: &Model<f32>, records: &[&NoduleRecord], n_samples: usize, seed: u64) -> Result<Vec<RecordRow>> {
    let rows = parallel::map_items(records.len(), |i| -> Result<RecordRow> {
        let r = records[i];
        let label = r.binary_label().ok_or_else(|| Error::Data(format!("record {} has mean rating 3", r.id)))?;
        let key = eval_key(seed, &r.id);
        let out = infer(model, &r.crop, n_samples, &mut key.child("prior").stream())?;
        let dice = if out.refused {
            None
        } else {
            let k = key.child("expert").stream().below(r.annotations.len());
            let pred: Vec<u8> = out.seg_mean.iter().map(|&p| (p >= 0.5) as u8).collect();
            Some(dice_coefficient(&pred, &r.annotations[k].mask.data))
        };
        Ok(RecordRow {
            id: r.id.clone(),
            fold: r.fold,
            label,
            p_b: out.p_binary.map(|p| p.0),
            p_m: out.p_binary.map(|p| p.1),
            div: out.div,
            refused: out.refused,
            dice,
        })
    });
    rows.into_iter().collect()
}

/// Pooled and per-fold reports plus every row.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub pooled: EvalReport,
    pub folds: Vec<EvalReport>,
    pub rows: Vec<RecordRow>,
}

impl Evaluation {
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(&self.pooled).expect("report serializes");
        v["folds"] = serde_json::to_value(&self.folds).expect("report serializes");
        v
    }

    pub fn rows_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut s = String::from("id,p_b,p_m,div,refused,dice,fold,label\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{},{},{},{}", r.id, opt(r.p_b), opt(r.p_m), opt(r.div), r.refused, opt(r.dice), r.fold, r.label as u8)
                .unwrap();
        }
        s
    }

    /// Writes the JSON report to `path` and the rows next to it as `<stem>.csv`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&self.to_json()).expect("report serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
        let csv = path.with_extension("csv");
        fs::write(&csv, self.rows_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(csv)
    }
}

/// Directory of the checkpoint trained with `fold` held out.
pub fn fold_dir(ckpt_dir: &Path, fold: usize) -> PathBuf {
    ckpt_dir.join(format!("fold{fold}"))
}

/// Loads `<ckpt_dir>/fold<k>/final.dspc` with its run config.
pub fn load_fold_model(ckpt_dir: &Path, fold: usize) -> Result<Model<f32>> {
    let dir = fold_dir(ckpt_dir, fold);
    let (cfg_path, ckpt) = (dir.join(RUN_CFG), dir.join(FINAL));
    if !cfg_path.exists() || !ckpt.exists() {
        return Err(Error::Config(format!("missing checkpoint for fold {fold}: expected {} and {}", ckpt.display(), cfg_path.display())));
    }
    let cfg = TrainConfig::load(&cfg_path)?;
    Model::load(&cfg.model, &ckpt)
}

/// Evaluates each fold's test records with the model trained without it.
pub fn evaluate(records: &[NoduleRecord], ckpt_dir: impl AsRef<Path>, folds: &[usize], n_samples: usize, seed: u64) -> Result<Evaluation> {
    let ckpt_dir = ckpt_dir.as_ref();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &k in folds {
        if k >= FOLDS {
            return Err(Error::Config(format!("fold {k} outside 0..{FOLDS}")));
        }
        let test = evaluable(records.iter().filter(|r| r.fold == k));
        if test.is_empty() {
            return Err(Error::Config(format!("fold {k} has no evaluable test records")));
        }
        let model = load_fold_model(ckpt_dir, k)?;
        let fold_rows = evaluate_records(&model, &test, n_samples, seed)?;
        reports.push(EvalReport::from_rows(&fold_rows, Some(k)));
        rows.extend(fold_rows);
    }
    Ok(Evaluation { pooled: EvalReport::from_rows(&rows, None), folds: reports, rows })
}
