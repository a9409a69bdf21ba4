//! Runs the set-attention stack on a random cloud: attention rows sum to
//! one, each layer commutes with point order and the pooled output ignores it.

use fcdx::nsam::{NsamLayer, NsamStack};
use fcdx::ModelConfig;
use fcdx_tensor::tape::attention_weights;
use fcdx_tensor::{ParamStore, Stream, Tape, Tensor};

fn main() -> fcdx::Result<()> {
    let cfg = ModelConfig::desk();
    let mut s = Stream::from_seed(4);
    let mut store = ParamStore::<f64>::new();
    let layer = NsamLayer::new(&mut store, "demo", cfg.width, cfg.heads, &mut s)?;
    let stack = NsamStack::new(&mut store, &cfg, &mut s)?;

    let n = 12;
    let x = Tensor::from_fn(&[n, cfg.width], |_| s.normal());
    let a = attention_weights(&x)?;
    let sums: Vec<String> = a.data().chunks(n).map(|r| format!("{:.6}", r.iter().sum::<f64>())).collect();
    println!("attention row sums: {}", sums.join(" "));

    let mut perm: Vec<usize> = (0..n).collect();
    s.shuffle(&mut perm);
    let c = cfg.width;
    let xp = Tensor::from_fn(&[n, c], |i| x.data()[perm[i / c] * c + i % c]);

    let run = |input: &Tensor<f64>| -> fcdx::Result<(Tensor<f64>, Tensor<f64>)> {
        let mut tape = Tape::new();
        let v = tape.constant(input.clone());
        let y = layer.forward(&mut tape, &store, v)?;
        let r = stack.forward(&mut tape, &store, v)?;
        Ok((tape.value(y).clone(), tape.value(r).clone()))
    };
    let ((y, r), (yp, rp)) = (run(&x)?, run(&xp)?);
    let equi = (0..n * c).map(|i| (yp.data()[i] - y.data()[perm[i / c] * c + i % c]).abs()).fold(0.0, f64::max);
    let inv = r.data().iter().zip(rp.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("layer output under permutation: max deviation {equi:.2e}");
    println!("pooled representation {:?} under permutation: max deviation {inv:.2e}", r.shape());
    Ok(())
}
