use std::fs;

use fcdx::cohort::{synthesize, Annotation, NoduleRecord};
use fcdx::config::ModelConfig;
use fcdx::train::{
    batch_loss, cross_entropy_5way, dice_loss, prepare_example, run_training, select_expert, train_step, training_records, Example,
    Scheme, TrainConfig, FINAL, METRICS, METRICS_HEADER,
};
use fcdx::volume::{Mask, Volume};
use fcdx::{Error, Model};
use fcdx_tensor::optim::Adam;
use fcdx_tensor::{Stream, Tape, Tensor};

/// An 8³ record with a centred cube lesion whose brightness follows the rating.
fn small_record(i: usize, ratings: &[u8]) -> NoduleRecord {
    let n = 8;
    let mut s = Stream::from_seed(i as u64 + 100);
    let level = ratings[0] as f32 / 5.0;
    let mut crop = Volume::filled([n; 3], -0.8);
    let mut mask = Mask::empty([n; 3]);
    for z in 2..6 {
        for y in 2..6 {
            for x in 2..6 {
                let k = (z * n + y) * n + x;
                mask.data[k] = 1;
                crop.data[k] = level;
            }
        }
    }
    crop.data.iter_mut().for_each(|v| *v += 0.05 * s.normal() as f32);
    NoduleRecord {
        id: format!("r{i:03}"),
        crop,
        annotations: ratings.iter().enumerate().map(|(r, &rating)| Annotation { rater: r, rating, mask: mask.clone() }).collect(),
        fold: i % 5,
    }
}

fn small_records(count: usize) -> Vec<NoduleRecord> {
    (0..count).map(|i| small_record(i, &[1 + (i % 5) as u8; 4])).collect()
}

fn tiny_config() -> TrainConfig {
    TrainConfig { batch_size: 2, epochs: 3, seed: 5, model: ModelConfig::tiny(), ..TrainConfig::default() }
}

// ---- expert sampling ----

#[test]
fn single_annotation_is_always_selected() {
    let r = small_record(0, &[4]);
    let mut s = Stream::from_seed(1);
    for _ in 0..50 {
        assert_eq!(select_expert(&r, &mut s).unwrap().rating, 4);
    }
}

#[test]
fn experts_are_drawn_uniformly() {
    let r = small_record(0, &[1, 2, 3, 4]);
    let mut s = Stream::from_seed(2);
    let mut counts = [0usize; 4];
    let draws = 10_000;
    for _ in 0..draws {
        counts[select_expert(&r, &mut s).unwrap().rater] += 1;
    }
    for c in counts {
        let f = c as f64 / draws as f64;
        assert!((f - 0.25).abs() <= 0.02, "{counts:?}");
    }
    // Pearson statistic against the uniform expectation; 3 degrees of freedom, 0.1% level.
    let e = draws as f64 / 4.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    assert!(chi2 < 16.27, "chi2 {chi2}");
}

#[test]
fn expert_draws_are_reproducible_and_need_annotations() {
    let r = small_record(0, &[1, 2, 3, 4]);
    let seq = |seed| {
        let mut s = Stream::from_seed(seed);
        (0..20).map(|_| select_expert(&r, &mut s).unwrap().rater).collect::<Vec<_>>()
    };
    assert_eq!(seq(9), seq(9));
    let empty = NoduleRecord { annotations: Vec::new(), ..r.clone() };
    assert!(matches!(select_expert(&empty, &mut Stream::from_seed(0)), Err(Error::Data(_))));
}

// ---- losses ----

fn ce(logits: [f64; 5], rating: u8) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let l = tape.variable(Tensor::from_f64(&[5], &logits).unwrap());
    let loss = cross_entropy_5way(&mut tape, l, rating).unwrap();
    let g = tape.backward(loss).unwrap();
    (tape.value(loss).item(), g.get(l).unwrap().data().to_vec())
}

#[test]
fn cross_entropy_examples() {
    let (loss, grad) = ce([0.0; 5], 3);
    assert!((loss - 5f64.ln()).abs() < 1e-12);
    let expected = [0.2, 0.2, -0.8, 0.2, 0.2];
    assert!(grad.iter().zip(expected).all(|(g, e)| (g - e).abs() < 1e-12), "{grad:?}");
    let (loss, _) = ce([0.0, 10.0, 0.0, 0.0, 0.0], 2);
    let closed = (1.0 + 4.0 * (-10f64).exp()).ln();
    assert!((loss - closed).abs() < 1e-12);
    assert!((loss - 1.8e-4).abs() < 5e-6);
}

#[test]
fn cross_entropy_rejects_bad_ratings() {
    let mut tape = Tape::<f64>::new();
    let l = tape.variable(Tensor::zeros(&[5]));
    assert!(matches!(cross_entropy_5way(&mut tape, l, 0), Err(Error::Data(_))));
    assert!(matches!(cross_entropy_5way(&mut tape, l, 6), Err(Error::Data(_))));
}

fn dice(probs: Vec<f64>, mask: &Mask) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(&[probs.len()], probs).unwrap());
    let l = dice_loss(&mut tape, p, mask).unwrap();
    tape.value(l).item()
}

#[test]
fn dice_loss_examples() {
    let mut mask = Mask::empty([32; 3]);
    mask.data[1000..1100].fill(1);
    let v = 100.0;
    let exact: Vec<f64> = mask.as_f32().iter().map(|&x| x as f64).collect();
    assert!(dice(exact.clone(), &mask).abs() < 1e-12);
    assert!((dice(vec![0.0; 32768], &mask) - (1.0 - 1.0 / 101.0)).abs() < 1e-12);
    let half: Vec<f64> = exact.iter().map(|x| x / 2.0).collect();
    assert!((dice(half, &mask) - (1.0 - (v + 1.0) / (1.5 * v + 1.0))).abs() < 1e-12);

    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::zeros(&[10]));
    assert!(dice_loss(&mut tape, p, &mask).is_err());
}

// ---- batches and refusals ----

/// Segmentation output driven only by latent channel 0, so the noise
/// decides which examples are refused.
fn refusal_model() -> Model<f64> {
    let cfg = ModelConfig::tiny();
    let mut m = Model::<f64>::new(&cfg, 3).unwrap();
    let w = m.heads.seg_out.weight;
    let data = m.store.get_mut(w).value.data_mut();
    data.fill(0.0);
    data[cfg.seg_channels] = 1.0;
    let b = m.heads.seg_out.bias.unwrap();
    m.store.get_mut(b).value.data_mut().fill(0.0);
    m
}

fn examples_with_noise(first: &[f64]) -> Vec<Example> {
    let cfg = tiny_config();
    first
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let mut e = prepare_example(&small_record(i, &[1 + i as u8; 3]), &cfg, 0).unwrap();
            e.noise[0] = z;
            e
        })
        .collect()
}

#[test]
fn refused_examples_are_left_out_of_the_classification_mean() {
    let model = refusal_model();
    let ex = examples_with_noise(&[-12.0, 0.0, 0.0, 0.0]);
    let mut tape = Tape::training();
    let loss = batch_loss(&model, &mut tape, &ex, 1.0, 0.2).unwrap();
    assert_eq!(loss.refusals, 1);
    assert_eq!(loss.cls_terms.len(), 3);
    assert!(loss.predictions[0].is_none() && loss.predictions[1..].iter().all(Option::is_some));
    let cls = tape.value(loss.cls.unwrap()).item();
    assert!((cls - loss.cls_terms.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    let dice = tape.value(loss.dice).item();
    assert!((dice - loss.dice_terms.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    assert!((tape.value(loss.total).item() - (cls + 0.2 * dice)).abs() < 1e-12);
}

#[test]
fn all_refused_batch_has_no_classification_gradient() {
    let model = refusal_model();
    let ex = examples_with_noise(&[-12.0, -12.0, -15.0]);
    let mut tape = Tape::training();
    let loss = batch_loss(&model, &mut tape, &ex, 1.0, 0.2).unwrap();
    assert_eq!(loss.refusals, 3);
    assert!(loss.cls.is_none());
    let total = tape.value(loss.total).item();
    assert!(total.is_finite());
    let g = tape.backward(loss.total).unwrap();
    let mut norm = 0.0;
    for (id, p) in model.store.iter() {
        if p.name.starts_with("nsam.") || p.name.starts_with("head.cls.") {
            norm += g.param(id).map_or(0.0, |t| t.data().iter().map(|v| v * v).sum());
        }
    }
    assert_eq!(norm, 0.0);
}

#[test]
fn zero_segmentation_weight_leaves_segmentation_parameters_untouched() {
    let model = Model::<f64>::new(&ModelConfig::tiny(), 4).unwrap();
    let ex = examples_with_noise(&[0.0, 0.3]);
    let mut tape = Tape::training();
    let loss = batch_loss(&model, &mut tape, &ex, 1.0, 0.0).unwrap();
    assert!(loss.cls.is_some());
    let g = tape.backward(loss.total).unwrap();
    let mut seg = 0;
    for (id, p) in model.store.iter() {
        if p.name.starts_with("backbone.seg.") || p.name.starts_with("head.seg.") {
            seg += 1;
            assert!(g.param(id).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)), "{}", p.name);
        }
    }
    assert!(seg > 0);
}

#[test]
fn loss_is_finite_at_initialization() {
    let cfg = tiny_config();
    let model = Model::<f32>::new(&cfg.model, 6).unwrap();
    let ex: Vec<Example> = small_records(5).iter().map(|r| prepare_example(r, &cfg, 0).unwrap()).collect();
    let mut tape = Tape::training();
    let loss = batch_loss(&model, &mut tape, &ex, 1.0, 0.2).unwrap();
    assert!(tape.value(loss.total).item().is_finite());
}

#[test]
fn one_fixed_batch_overfits() {
    let cfg = TrainConfig { augment: false, ..tiny_config() };
    let mut model = Model::<f32>::new(&cfg.model, 7).unwrap();
    let mut adam = Adam::new(&model.store, cfg.adam());
    let ex: Vec<Example> = small_records(4).iter().map(|r| prepare_example(r, &cfg, 0).unwrap()).collect();
    let first = train_step(&mut model, &mut adam, &ex, &cfg).unwrap().total;
    let mut last = first;
    for _ in 1..200 {
        last = train_step(&mut model, &mut adam, &ex, &cfg).unwrap().total;
    }
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
    assert_eq!(adam.step, 200);
}

#[test]
fn one_step_reads_one_annotation_per_record() {
    let cfg = tiny_config();
    let mut r = small_record(1, &[2, 4]);
    r.annotations[1].mask.data.fill(0);
    r.annotations[1].mask.data[0] = 1;
    for epoch in 0..20 {
        let e = prepare_example(&r, &TrainConfig { augment: false, ..cfg.clone() }, epoch).unwrap();
        let k = if e.rating == 2 { 0 } else { 1 };
        assert_eq!(e.mask, r.annotations[k].mask);
    }
}

// ---- runs ----

#[test]
fn low_ambiguity_filter_keeps_clear_records() {
    let records: Vec<NoduleRecord> = (0..40).map(|i| synthesize(2, i, 0.0).record).collect();
    let cfg = TrainConfig { scheme: Scheme::LowAmbig, holdout: false, ..TrainConfig::default() };
    let kept = training_records(&records, &cfg).unwrap();
    assert!(kept.iter().all(|r| r.mean_rating() != 3.0 && r.annotations.len() >= 3));
    assert_eq!(kept.len(), records.iter().filter(|r| r.mean_rating() != 3.0).count());
    let high = TrainConfig { scheme: Scheme::HighAmbig, ..cfg.clone() };
    assert_eq!(training_records(&records, &high).unwrap().len(), 40);

    let threes: Vec<NoduleRecord> = (0..3).map(|i| small_record(i, &[3, 3, 3])).collect();
    let err = training_records(&threes, &cfg).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("low")), "{err}");
}

#[test]
fn config_round_trip_and_validation() {
    let cfg = TrainConfig { scheme: Scheme::LowAmbig, batch_size: 3, lr: 0.002, seed: 11, fold: 2, augment: false, ..tiny_config() };
    assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    assert!(matches!(TrainConfig::from_kv("bogus=1"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::from_kv("epochs=0"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::from_kv("fold=5"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::from_kv("cls_weight=-1"), Err(Error::Config(_))));
    let c = TrainConfig::from_kv("# comment\nmodel.preset=tiny\nepochs = 2\n").unwrap();
    assert_eq!((c.epochs, c.model.input), (2, 8));
}

#[test]
fn reruns_are_byte_identical() {
    let records = small_records(7);
    let cfg = tiny_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_training(&cfg, &records, a.path(), false, |_| {}).unwrap();
    run_training(&cfg, &records, b.path(), false, |_| {}).unwrap();
    for f in [METRICS, FINAL, "run.cfg", "best.dspc"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(a.path().join(METRICS)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 1 + cfg.epochs);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let records = small_records(7);
    let cfg = tiny_config();
    let (whole, parts) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_training(&cfg, &records, whole.path(), false, |_| {}).unwrap();
    run_training(&TrainConfig { epochs: 1, ..cfg.clone() }, &records, parts.path(), false, |_| {}).unwrap();
    let mut seen = Vec::new();
    run_training(&cfg, &records, parts.path(), true, |s| seen.push(s.epoch)).unwrap();
    assert_eq!(seen, vec![2, 3]);
    for f in [METRICS, FINAL, "state.dspc", "run.cfg"] {
        assert_eq!(fs::read(whole.path().join(f)).unwrap(), fs::read(parts.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn empty_training_set_is_a_config_error() {
    let records = small_records(3);
    let cfg = TrainConfig { scheme: Scheme::LowAmbig, ..tiny_config() };
    let threes: Vec<NoduleRecord> = records.iter().map(|r| small_record(r.fold, &[3, 3, 3, 3])).collect();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(run_training(&cfg, &threes, dir.path(), false, |_| {}), Err(Error::Config(_))));
}
