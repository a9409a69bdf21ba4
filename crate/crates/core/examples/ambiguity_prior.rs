//! Samples the ambiguity prior for one synthetic nodule: the spread of the
//! 5-way outputs across draws, and how it vanishes when the variance is pinned.

use fcdx::cohort::synthesize;
use fcdx::eval::infer;
use fcdx::{Model, ModelConfig};
use fcdx_tensor::Stream;

fn main() -> fcdx::Result<()> {
    let nodule = synthesize(5, 3, 0.3);
    let ratings: Vec<u8> = nodule.record.annotations.iter().map(|a| a.rating).collect();
    println!("nodule {} with rater scores {ratings:?}", nodule.record.id);

    let mut model = Model::<f32>::new(&ModelConfig::desk(), 5)?;
    for pinned in [false, true] {
        if pinned {
            model.clamp_variance(-80.0);
        }
        let out = infer(&model, &nodule.record.crop, 8, &mut Stream::from_seed(1))?;
        println!("{}", if pinned { "log-variance pinned at -80:" } else { "untrained prior:" });
        for p in &out.per_sample_probs {
            let row: Vec<String> = p.iter().map(|v| format!("{v:.3}")).collect();
            println!("  {}", row.join(" "));
        }
        match (out.p_binary, out.div) {
            (Some((pb, pm)), Some(div)) => println!("  p_b {pb:.4} p_m {pm:.4} DIV {div:.2e}"),
            _ => println!("  refused (soft volume {:.1})", out.volume),
        }
    }
    Ok(())
}
