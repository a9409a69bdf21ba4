//! Built-in invariant suite behind the `selftest` command.

use fcdx_tensor::gradcheck::{check_inputs, check_params, max_rel_err};
use fcdx_tensor::tape::attention_weights;
use fcdx_tensor::{ParamStore, Stream, StreamKey, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::metrics::{aggregate_binary, auc, diversity};
use crate::model::Model;
use crate::nsam::{NsamLayer, NsamStack};
use crate::prior::{draw_noise, reparameterize};
use crate::train::{batch_loss, Example};
use crate::volume::{Mask, Volume};

#[derive(Clone, Debug, Default)]
pub struct Options {
    /// Scales every attention row by 1.01 before the row-sum check, to
    /// show that the suite notices a broken softmax.
    pub perturb_softmax: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    /// Worst observed deviation.
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

type Graph<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> fcdx_tensor::Result<Var>;

fn random(shape: &[usize], s: &mut Stream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| s.uniform_range(-1.0, 1.0))
}

fn project(tape: &mut Tape<f64>, y: Var) -> fcdx_tensor::Result<Var> {
    let r = Tensor::from_fn(tape.shape(y), |i| ((i as f64 + 1.0) * 0.618034).sin());
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Worst finite-difference error over a few composite operations.
pub fn op_gradients(seed: u64) -> Result<f64> {
    let mut s = StreamKey::root(seed).child("ops").stream();
    let cases: Vec<(Vec<Tensor<f64>>, Graph)> = vec![
        (vec![random(&[2, 2, 4, 4, 4], &mut s), random(&[3, 2, 3, 3, 3], &mut s)], &|t, v| {
            let y = t.conv3d(v[0], v[1], None)?;
            project(t, y)
        }),
        (vec![random(&[5, 3], &mut s), random(&[3, 4], &mut s)], &|t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.softmax(y, 1)?;
            project(t, y)
        }),
        (vec![random(&[6, 4], &mut s)], &|t, v| {
            let y = t.attention(v[0])?;
            project(t, y)
        }),
        (vec![random(&[2, 2, 2, 2, 2], &mut s), random(&[2], &mut s), random(&[2], &mut s)], &|t, v| {
            let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            let y = t.sigmoid(y);
            project(t, y)
        }),
    ];
    let mut worst = 0.0f64;
    for (inputs, f) in cases {
        let probes = check_inputs(&inputs, f, 12, 1e-5, &mut s)?;
        worst = worst.max(max_rel_err(&probes));
    }
    Ok(worst)
}

/// A batch of two random examples sized for `cfg`.
pub fn random_examples(cfg: &ModelConfig, s: &mut Stream) -> Vec<Example> {
    let n = cfg.input;
    (0..2)
        .map(|i| {
            let crop = Volume { extents: [n; 3], spacing: [1.0; 3], data: (0..n * n * n).map(|_| s.uniform_range(-1.0, 1.0) as f32).collect() };
            let mask = Mask { extents: [n; 3], data: (0..n * n * n).map(|_| s.bernoulli(0.3) as u8).collect() };
            Example {
                id: format!("g{i}"),
                crop,
                rating: 1 + s.below(5) as u8,
                consensus_rating: 3,
                consensus_mask: mask.clone(),
                mask,
                noise: (0..cfg.latent).map(|_| s.normal()).collect(),
            }
        })
        .collect()
}

/// Reduced network in 64-bit with nothing refused, so the loss touches
/// every parameter.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig { refusal_volume: 0.0, ..ModelConfig::tiny() }
}

/// Worst finite-difference error of the full training loss with respect
/// to randomly probed parameters of the reduced network.
pub fn model_gradient(seed: u64, probes: usize) -> Result<f64> {
    let cfg = gradcheck_config();
    let template = Model::<f64>::new(&cfg, seed)?;
    let mut s = StreamKey::root(seed).child("examples").stream();
    let examples = random_examples(&cfg, &mut s);
    let mut store: ParamStore<f64> = template.store.clone();
    let f = |tape: &mut Tape<f64>, store: &ParamStore<f64>| -> fcdx_tensor::Result<Var> {
        // The probe tape is fresh; swap in a training tape so batchnorm uses batch statistics.
        *tape = Tape::training();
        let model = Model { store: store.clone(), ..template.clone() };
        let loss = batch_loss(&model, tape, &examples, 1.0, 0.2).map_err(|e| fcdx_tensor::TensorError::Argument { op: "model", msg: e.to_string() })?;
        Ok(loss.total)
    };
    let probes = check_params(&mut store, f, probes, 1e-5, &mut StreamKey::root(seed).child("probes").stream())?;
    Ok(max_rel_err(&probes))
}

/// Worst `|Σ_j P_ij − 1|` over random clouds.
pub fn attention_row_sums(seed: u64, perturb: bool) -> Result<f64> {
    let mut s = StreamKey::root(seed).child("rows").stream();
    let mut worst = 0.0f64;
    for n in [1, 2, 5, 17, 40] {
        let x = random(&[n, 4], &mut s).map(|v| 3.0 * v);
        let mut p = attention_weights(&x)?;
        if perturb {
            p.data_mut().iter_mut().for_each(|v| *v *= 1.01);
        }
        for row in p.data().chunks(n) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let c = x.shape()[1];
    Tensor::from_fn(x.shape(), |i| x.data()[perm[i / c] * c + i % c])
}

/// Layer equivariance and stack invariance under random row permutations;
/// returns the worst deviation of either.
pub fn permutation_symmetry(seed: u64, trials: usize) -> Result<f64> {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::<f64>::new();
    let mut s = StreamKey::root(seed).child("perm").stream();
    let layer = NsamLayer::new(&mut store, "layer", cfg.width, cfg.heads, &mut s)?;
    let stack = NsamStack::new(&mut store, &cfg, &mut s)?;
    let run = |x: &Tensor<f64>, whole: bool| -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = if whole { stack.forward(&mut tape, &store, v)? } else { layer.forward(&mut tape, &store, v)? };
        Ok(tape.value(y).clone())
    };
    let mut worst = 0.0f64;
    for t in 0..trials {
        let n = 2 + t % 9;
        let x = random(&[n, cfg.width], &mut s);
        let mut perm: Vec<usize> = (0..n).collect();
        s.shuffle(&mut perm);
        let (y, yp) = (run(&x, false)?, run(&permute_rows(&x, &perm), false)?);
        let expected = permute_rows(&y, &perm);
        worst = yp.data().iter().zip(expected.data()).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        let (r, rp) = (run(&x, true)?, run(&permute_rows(&x, &perm), true)?);
        worst = r.data().iter().zip(rp.data()).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

/// Largest deviation of the sample mean from 0 and sample std from 1.
pub fn reparameterization_moments(seed: u64, draws: usize) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let mu = tape.constant(Tensor::zeros(&[draws, 1]));
    let lv = tape.constant(Tensor::zeros(&[draws, 1]));
    let noise = draw_noise(draws, 1, &mut StreamKey::root(seed).child("reparam").stream());
    let f = reparameterize(&mut tape, mu, lv, noise)?;
    let v = tape.value(f).data();
    let mean = v.iter().sum::<f64>() / draws as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws as f64).sqrt();
    Ok(mean.abs().max((std - 1.0).abs()))
}

/// Worst `|p_b + p_m − 1|` over random logit sets.
pub fn binary_sums(seed: u64, sets: usize) -> f64 {
    let mut s = StreamKey::root(seed).child("binary").stream();
    (0..sets)
        .map(|_| {
            let rows: Vec<[f64; 5]> = (0..1 + s.below(10)).map(|_| [0; 5].map(|_| s.uniform_range(-20.0, 20.0))).collect();
            let (b, m) = aggregate_binary(&rows);
            (b + m - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Worst gap between [`diversity`] and a direct per-mode computation.
pub fn diversity_oracle(seed: u64) -> f64 {
    let mut s = StreamKey::root(seed).child("div").stream();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 1 + s.below(12);
        let rows: Vec<[f64; 5]> = (0..n)
            .map(|_| {
                let r = [0; 5].map(|_| s.uniform());
                let z: f64 = r.iter().sum();
                r.map(|v| v / z)
            })
            .collect();
        let mut direct = 0.0;
        for k in 0..5 {
            let m = rows.iter().map(|r| r[k]).sum::<f64>() / n as f64;
            direct += (rows.iter().map(|r| (r[k] - m) * (r[k] - m)).sum::<f64>() / n as f64).sqrt() / 5.0;
        }
        worst = worst.max((diversity(&rows) - direct).abs());
    }
    worst
}

/// Number of random instances where the rank AUC differs from pair counting.
pub fn auc_mismatches(seed: u64) -> f64 {
    let mut s = StreamKey::root(seed).child("auc").stream();
    let mut bad = 0;
    for _ in 0..50 {
        let n = 2 + s.below(49);
        let scores: Vec<f64> = (0..n).map(|_| s.below(8) as f64 / 8.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| s.bernoulli(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        if auc(&scores, &labels) != Some(wins / pairs) {
            bad += 1;
        }
    }
    bad as f64
}

/// Runs every check in order.
pub fn run(opts: &Options) -> Result<Vec<Check>> {
    let seed = 20;
    Ok(vec![
        Check { name: "operation gradients", value: op_gradients(seed)?, tolerance: 1e-4 },
        Check { name: "network gradient", value: model_gradient(seed, 12)?, tolerance: 1e-4 },
        Check { name: "attention row sums", value: attention_row_sums(seed, opts.perturb_softmax)?, tolerance: 1e-6 },
        Check { name: "permutation symmetry", value: permutation_symmetry(seed, 20)?, tolerance: 1e-6 },
        Check { name: "reparameterization moments", value: reparameterization_moments(seed, 100_000)?, tolerance: 0.02 },
        Check { name: "binary probabilities sum", value: binary_sums(seed, 1000), tolerance: 1e-6 },
        Check { name: "diversity oracle", value: diversity_oracle(seed), tolerance: 1e-9 },
        Check { name: "auc pair counting", value: auc_mismatches(seed), tolerance: 0.0 },
    ])
}

pub fn table(checks: &[Check]) -> String {
    let mut s = format!("{:<28} {:>12} {:>10}  result\n", "check", "value", "tolerance");
    for c in checks {
        s += &format!("{:<28} {:>12.3e} {:>10.1e}  {}\n", c.name, c.value, c.tolerance, if c.passed() { "pass" } else { "FAIL" });
    }
    s
}
