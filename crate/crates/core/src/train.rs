//! Multi-task training: per-step expert sampling, augmentation, the
//! refusal-masked classification loss plus dice, Adam, and resumable runs.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use fcdx_tensor::checkpoint::{self, NamedTensor};
use fcdx_tensor::optim::{Adam, AdamConfig};
use fcdx_tensor::{parallel, Scalar, Stream, StreamKey, Tape, Tensor, Var};

use crate::augment::augment;
use crate::cohort::{Annotation, NoduleRecord};
use crate::config::{ModelConfig, CLASSES};
use crate::error::{Error, Result};
use crate::model::{wrap_checkpoint, Model};
use crate::prior::draw_noise;
use crate::volume::{Mask, Volume};

pub const RUN_CFG: &str = "run.cfg";
pub const METRICS: &str = "metrics.csv";
pub const FINAL: &str = "final.dspc";
pub const BEST: &str = "best.dspc";
/// Model, optimizer and counters after the last finished epoch.
pub const STATE: &str = "state.dspc";
pub const METRICS_HEADER: &str = "epoch,step,total_loss,cls_loss,dice_loss,refusals,train_acc,train_dice";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// Only records with at least three annotations and a mean rating other than 3.
    LowAmbig,
    /// Every record.
    HighAmbig,
}

impl Scheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Scheme::LowAmbig),
            "high" => Ok(Scheme::HighAmbig),
            _ => Err(Error::Config(format!("scheme must be `low` or `high`, got `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::LowAmbig => "low",
            Scheme::HighAmbig => "high",
        }
    }

    pub fn keeps(self, r: &NoduleRecord) -> bool {
        match self {
            Scheme::LowAmbig => r.is_low_ambiguity(),
            Scheme::HighAmbig => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub cls_weight: f64,
    pub seg_weight: f64,
    pub seed: u64,
    /// Held-out test fold.
    pub fold: usize,
    /// When false the held-out fold is trained on as well.
    pub holdout: bool,
    pub augment: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::HighAmbig,
            batch_size: 8,
            lr: 1e-3,
            epochs: 40,
            cls_weight: 1.0,
            seg_weight: 0.2,
            seed: 0,
            fold: 0,
            holdout: true,
            augment: true,
            model: ModelConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        let w = [self.cls_weight, self.seg_weight];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("loss weights must be non-negative and not both zero".into()));
        }
        if self.fold >= crate::cohort::FOLDS {
            return Err(Error::Config(format!("fold must be in 0..{}, got {}", crate::cohort::FOLDS, self.fold)));
        }
        self.model.validate()
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("scheme", self.scheme.name().to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("cls_weight", self.cls_weight.to_string()),
            ("seg_weight", self.seg_weight.to_string()),
            ("seed", self.seed.to_string()),
            ("fold", self.fold.to_string()),
            ("holdout", self.holdout.to_string()),
            ("augment", self.augment.to_string()),
        ] {
            writeln!(s, "{k}={v}").unwrap();
        }
        s + &self.model.to_kv()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("{key}: cannot parse `{value}`"));
        match key {
            "scheme" => self.scheme = Scheme::parse(value)?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad())?,
            "lr" => self.lr = value.parse().map_err(|_| bad())?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad())?,
            "cls_weight" => self.cls_weight = value.parse().map_err(|_| bad())?,
            "seg_weight" => self.seg_weight = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "fold" => self.fold = value.parse().map_err(|_| bad())?,
            "holdout" => self.holdout = value.parse().map_err(|_| bad())?,
            "augment" => self.augment = value.parse().map_err(|_| bad())?,
            _ => match key.strip_prefix("model.") {
                Some(k) => self.model.set(k, value)?,
                None => return Err(Error::Config(format!("unknown key {key}"))),
            },
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// Uniform choice among the available annotations.
pub fn select_expert<'a>(record: &'a NoduleRecord, stream: &mut Stream) -> Result<&'a Annotation> {
    if record.annotations.is_empty() {
        return Err(Error::Data(format!("record {} has no annotations", record.id)));
    }
    Ok(&record.annotations[stream.below(record.annotations.len())])
}

/// `−log softmax(logits)[rating − 1]` for one row of five logits.
pub fn cross_entropy_5way<T: Scalar>(tape: &mut Tape<T>, logits: Var, rating: u8) -> Result<Var> {
    if !(1..=CLASSES as u8).contains(&rating) {
        return Err(Error::Data(format!("rating {rating} outside 1..{CLASSES}")));
    }
    Ok(tape.cross_entropy(logits, rating as usize - 1)?)
}

/// Soft dice loss with smoothing 1.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, target: &Mask) -> Result<Var> {
    let t = Tensor::new(&[target.data.len()], target.as_f32().into_iter().map(|v| T::of(v as f64)).collect())?;
    Ok(tape.dice_loss(probs, &t, 1.0)?)
}

/// Records used for training under `cfg`.
pub fn training_records<'a>(records: &'a [NoduleRecord], cfg: &TrainConfig) -> Result<Vec<&'a NoduleRecord>> {
    let in_split: Vec<&NoduleRecord> = records.iter().filter(|r| !cfg.holdout || r.fold != cfg.fold).collect();
    let kept: Vec<&NoduleRecord> = in_split.iter().copied().filter(|r| cfg.scheme.keeps(r)).collect();
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "no training records: {} records, {} outside test fold {}, 0 kept by the {} scheme filter",
            records.len(),
            in_split.len(),
            cfg.fold,
            cfg.scheme.name()
        )));
    }
    Ok(kept)
}

/// One prepared training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub crop: Volume,
    /// The sampled expert's rating and mask.
    pub rating: u8,
    pub mask: Mask,
    /// Consensus targets under the same augmentation, for metrics only.
    pub consensus_rating: u8,
    pub consensus_mask: Mask,
    /// Standard normal draw for the prior sample.
    pub noise: Vec<f64>,
}

/// Key of the per-record streams for one epoch.
pub fn example_key(seed: u64, epoch: usize, id: &str) -> StreamKey {
    StreamKey::root(seed).child("train").index(epoch as u64).child(id)
}

pub fn prepare_example(record: &NoduleRecord, cfg: &TrainConfig, epoch: usize) -> Result<Example> {
    let key = example_key(cfg.seed, epoch, &record.id);
    let expert = select_expert(record, &mut key.child("expert").stream())?;
    let consensus = record.consensus_mask();
    let (crop, mask, consensus_mask) = if cfg.augment {
        let (c, mut m, _) = augment(&record.crop, &[expert.mask.clone(), consensus], &mut key.child("augment").stream());
        let cm = m.pop().unwrap();
        (c, m.pop().unwrap(), cm)
    } else {
        (record.crop.clone(), expert.mask.clone(), consensus)
    };
    let noise = draw_noise::<f64>(1, cfg.model.latent, &mut key.child("prior").stream()).data().to_vec();
    Ok(Example {
        id: record.id.clone(),
        crop,
        rating: expert.rating,
        mask,
        consensus_rating: record.consensus_rating(),
        consensus_mask,
        noise,
    })
}

/// Loss terms of one batch, still on the tape.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: Var,
    /// Mean cross-entropy over classified examples; `None` if all were refused.
    pub cls: Option<Var>,
    pub dice: Var,
    pub refusals: usize,
    /// Argmax class index per example, `None` for refusals.
    pub predictions: Vec<Option<usize>>,
    /// Hard dice of `probs ≥ 0.5` against each consensus mask.
    pub hard_dice: Vec<f64>,
    pub cls_terms: Vec<f64>,
    pub dice_terms: Vec<f64>,
}

/// `cls_weight · mean CE over non-refused + seg_weight · mean dice over all`.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    examples: &[Example],
    cls_weight: f64,
    seg_weight: f64,
) -> Result<BatchLoss> {
    if examples.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let b = examples.len();
    let latent = model.config.latent;
    let crops: Vec<&Volume> = examples.iter().map(|e| &e.crop).collect();
    let x = tape.constant(model.input(&crops)?);
    let mut noise = Vec::with_capacity(b * latent);
    for e in examples {
        if e.noise.len() != latent {
            return Err(Error::Argument(format!("noise of length {} for latent size {latent}", e.noise.len())));
        }
        noise.extend(e.noise.iter().map(|&v| T::of(v)));
    }
    let out = model.forward(tape, x, Tensor::new(&[b, latent], noise)?, None)?;

    let mut cls_vars = Vec::new();
    let mut predictions = vec![None; b];
    if let Some(logits) = out.logits {
        for (row, &i) in out.classified.iter().enumerate() {
            let l = tape.index0(logits, row)?;
            cls_vars.push(cross_entropy_5way(tape, l, examples[i].rating)?);
            let v = tape.value(l).data();
            let arg = (0..v.len()).fold(0, |best, k| if v[k] > v[best] { k } else { best });
            predictions[i] = Some(arg);
        }
    }
    let voxels = tape.value(out.seg_probs).numel() / b;
    let mut dice_vars = Vec::with_capacity(b);
    let mut hard_dice = Vec::with_capacity(b);
    for (i, e) in examples.iter().enumerate() {
        let p = tape.index0(out.seg_probs, i)?;
        dice_vars.push(dice_loss(tape, p, &e.mask)?);
        let pred: Vec<u8> = tape.value(out.seg_probs).data()[i * voxels..(i + 1) * voxels].iter().map(|v| (v.f64() >= 0.5) as u8).collect();
        hard_dice.push(crate::metrics::dice_coefficient(&pred, &e.consensus_mask.data));
    }

    let cls_terms = cls_vars.iter().map(|&v| tape.value(v).item().f64()).collect();
    let dice_terms = dice_vars.iter().map(|&v| tape.value(v).item().f64()).collect();
    let cls = mean_of(tape, &cls_vars)?;
    let dice = mean_of(tape, &dice_vars)?.expect("batch is non-empty");
    let seg_term = tape.scale(dice, T::of(seg_weight));
    let total = match cls {
        Some(c) => {
            let cls_term = tape.scale(c, T::of(cls_weight));
            tape.add(cls_term, seg_term)?
        }
        None => seg_term,
    };
    Ok(BatchLoss { total, cls, dice, refusals: b - out.classified.len(), predictions, hard_dice, cls_terms, dice_terms })
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = vars.split_first() else { return Ok(None) };
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(Some(tape.scale(acc, T::of(1.0 / vars.len() as f64))))
}

/// What one optimizer step saw.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub cls_terms: Vec<f64>,
    pub dice_terms: Vec<f64>,
    pub refusals: usize,
    pub correct: usize,
    pub hard_dice: Vec<f64>,
}

/// Forward, backward, batch-norm statistics update and one Adam step.
pub fn train_step<T: Scalar>(model: &mut Model<T>, adam: &mut Adam<T>, examples: &[Example], cfg: &TrainConfig) -> Result<StepStats> {
    let mut tape = Tape::training();
    let loss = batch_loss(model, &mut tape, examples, cfg.cls_weight, cfg.seg_weight)?;
    let total = tape.value(loss.total).item().f64();
    if !total.is_finite() {
        return Err(Error::Data(format!("non-finite loss {total}")));
    }
    let grads = tape.backward(loss.total)?;
    model.store.zero_grad();
    model.store.accumulate(&grads);
    model.store.apply_updates(tape.take_updates());
    adam.step(&mut model.store)?;
    let correct = examples
        .iter()
        .zip(&loss.predictions)
        .filter(|(e, p)| **p == Some(e.consensus_rating as usize - 1))
        .count();
    Ok(StepStats { total, cls_terms: loss.cls_terms, dice_terms: loss.dice_terms, refusals: loss.refusals, correct, hard_dice: loss.hard_dice })
}

/// Per-epoch summary, one metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Mean of the per-step total losses.
    pub total: f64,
    pub cls: f64,
    pub dice: f64,
    pub refusals: usize,
    /// Argmax against the consensus rating; refusals count as wrong.
    pub accuracy: f64,
    pub train_dice: f64,
}

impl EpochStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{},{:.4},{:.4}",
            self.epoch, self.step, self.total, self.cls, self.dice, self.refusals, self.accuracy, self.train_dice
        )
    }
}

/// Model, optimizer and counters of a run in progress.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    /// Finished epochs.
    pub epoch: usize,
    pub best: Option<f32>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model, cfg.seed)?;
        let adam = Adam::new(&model.store, cfg.adam());
        Ok(Trainer { cfg, model, adam, epoch: 0, best: None })
    }

    /// Visiting order of the records in epoch `epoch` (0-based).
    pub fn order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        StreamKey::root(self.cfg.seed).child("order").index(epoch as u64).stream().shuffle(&mut idx);
        idx
    }

    pub fn run_epoch(&mut self, records: &[&NoduleRecord]) -> Result<EpochStats> {
        let epoch = self.epoch;
        let order = self.order(records.len(), epoch);
        let (mut totals, mut cls, mut dice, mut hard) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let (mut refusals, mut correct) = (0, 0);
        for chunk in order.chunks(self.cfg.batch_size) {
            let cfg = &self.cfg;
            let examples: Vec<Example> = parallel::map_items(chunk.len(), |i| prepare_example(records[chunk[i]], cfg, epoch))
                .into_iter()
                .collect::<Result<_>>()?;
            let s = train_step(&mut self.model, &mut self.adam, &examples, &self.cfg)?;
            totals.push(s.total);
            cls.extend(s.cls_terms);
            dice.extend(s.dice_terms);
            hard.extend(s.hard_dice);
            refusals += s.refusals;
            correct += s.correct;
        }
        self.epoch += 1;
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        Ok(EpochStats {
            epoch: self.epoch,
            step: self.adam.step,
            total: mean(&totals),
            cls: mean(&cls),
            dice: mean(&dice),
            refusals,
            accuracy: correct as f64 / records.len() as f64,
            train_dice: mean(&hard),
        })
    }

    /// Full state: parameters, Adam moments and counters.
    pub fn state(&self) -> Vec<NamedTensor> {
        let mut out = self.model.to_named();
        for (i, (_, p)) in self.model.store.iter().enumerate() {
            if p.trainable {
                for (prefix, buf) in [("adam.m.", &self.adam.m[i]), ("adam.v.", &self.adam.v[i])] {
                    out.push(NamedTensor { name: format!("{prefix}{}", p.name), shape: buf.shape().to_vec(), data: buf.data().to_vec() });
                }
            }
        }
        out.push(counter("adam.step", self.adam.step));
        out.push(counter("train.epoch", self.epoch as u64));
        if let Some(b) = self.best {
            out.push(NamedTensor::scalar("train.best", b));
        }
        out
    }

    pub fn restore(&mut self, entries: &[NamedTensor]) -> Result<()> {
        self.model.load_named(entries)?;
        let find = |name: &str| entries.iter().find(|e| e.name == name);
        let missing = |name: &str| Error::Data(format!("training state lacks `{name}`"));
        for (i, (_, p)) in self.model.store.iter().enumerate() {
            if !p.trainable {
                continue;
            }
            for (prefix, buf) in [("adam.m.", &mut self.adam.m[i]), ("adam.v.", &mut self.adam.v[i])] {
                let name = format!("{prefix}{}", p.name);
                let e = find(&name).ok_or_else(|| missing(&name))?;
                *buf = Tensor::new(&e.shape, e.data.clone())?;
            }
        }
        self.adam.step = read_counter(find("adam.step").ok_or_else(|| missing("adam.step"))?)?;
        self.epoch = read_counter(find("train.epoch").ok_or_else(|| missing("train.epoch"))?)? as usize;
        self.best = find("train.best").map(|e| e.data[0]);
        Ok(())
    }

    pub fn save_state(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        checkpoint::save(path, &self.state()).map_err(|e| wrap_checkpoint(path, e))
    }

    pub fn load_state(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let entries = checkpoint::load(path).map_err(|e| wrap_checkpoint(path, e))?;
        self.restore(&entries)
    }
}

/// Counters are stored as f32, split in two 24-bit halves to stay exact.
fn counter(name: &str, v: u64) -> NamedTensor {
    NamedTensor { name: name.into(), shape: vec![2], data: vec![(v >> 24) as f32, (v & 0xFF_FFFF) as f32] }
}

fn read_counter(e: &NamedTensor) -> Result<u64> {
    match e.data[..] {
        [hi, lo] => Ok(((hi as u64) << 24) | lo as u64),
        _ => Err(Error::Data(format!("counter `{}` has {} values", e.name, e.data.len()))),
    }
}

/// Where a run writes its files.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join(RUN_CFG)
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join(METRICS)
    }

    pub fn final_ckpt(&self) -> PathBuf {
        self.dir.join(FINAL)
    }

    pub fn best_ckpt(&self) -> PathBuf {
        self.dir.join(BEST)
    }

    pub fn state(&self) -> PathBuf {
        self.dir.join(STATE)
    }
}

/// Trains on `records` and writes the run config, metrics log and
/// checkpoints into `out`. With `resume`, continues from the saved state
/// when one exists. `on_epoch` sees each finished epoch.
pub fn run_training(
    cfg: &TrainConfig,
    records: &[NoduleRecord],
    out: impl AsRef<Path>,
    resume: bool,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Trainer> {
    let paths = RunPaths::new(out.as_ref());
    let selected = training_records(records, cfg)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
    if resume && paths.state().exists() {
        trainer.load_state(paths.state())?;
    } else {
        write_file(&paths.metrics(), format!("{METRICS_HEADER}\n").as_bytes())?;
    }
    write_file(&paths.config(), cfg.to_kv().as_bytes())?;
    while trainer.epoch < cfg.epochs {
        let stats = trainer.run_epoch(&selected)?;
        append_line(&paths.metrics(), &stats.csv_row())?;
        let loss = stats.total as f32;
        if trainer.best.is_none_or(|b| loss < b) {
            trainer.best = Some(loss);
            trainer.model.save(paths.best_ckpt())?;
        }
        trainer.save_state(paths.state())?;
        on_epoch(&stats);
    }
    trainer.model.save(paths.final_ckpt())?;
    Ok(trainer)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
