//! Overfits a small synthetic cohort and prints one metrics row per epoch.
//!
//! `cargo run --release --example train_overfit -- [records] [epochs] [out] [batch]`

use fcdx::cohort::synthesize;
use fcdx::train::{run_training, TrainConfig, METRICS_HEADER};

fn main() -> fcdx::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(32);
    let epochs: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(40);
    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("fcdx-overfit").display().to_string());
    let batch_size: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(8);

    let records: Vec<_> = (0..n).map(|i| synthesize(7, i, 0.1).record).collect();
    let cfg = TrainConfig { epochs, batch_size, holdout: false, augment: false, seed: 7, ..TrainConfig::default() };
    println!("{METRICS_HEADER}");
    let t0 = std::time::Instant::now();
    run_training(&cfg, &records, &out, false, |s| println!("{}  ({:.0}s)", s.csv_row(), t0.elapsed().as_secs_f64()))?;
    println!("checkpoints in {out}");
    Ok(())
}
