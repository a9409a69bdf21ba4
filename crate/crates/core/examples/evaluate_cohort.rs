//! Trains on folds 1-4 of a synthetic cohort and scores fold 0 after every
//! epoch, once per training scheme.
//!
//! `cargo run --release --example evaluate_cohort -- [records] [epochs] [schemes]`
//!
//! `schemes` is a comma list of `high` and `low` (default both).

use fcdx::cohort::synthesize;
use fcdx::eval::{evaluable, evaluate_records, EvalReport};
use fcdx::train::{training_records, Scheme, TrainConfig, Trainer};

fn main() -> fcdx::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(250);
    let epochs: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(8);
    let schemes = args.next().unwrap_or_else(|| "high,low".into());

    let records: Vec<_> = (0..n).map(|i| synthesize(11, i, 0.3).record).collect();
    let test = evaluable(records.iter().filter(|r| r.fold == 0));
    let t0 = std::time::Instant::now();
    for name in schemes.split(',') {
        let cfg = TrainConfig { scheme: Scheme::parse(name)?, epochs, fold: 0, seed: 11, ..TrainConfig::default() };
        let train = training_records(&records, &cfg)?;
        println!("scheme {name}: {} training records, {} test records", train.len(), test.len());
        let mut trainer = Trainer::new(cfg)?;
        for _ in 0..epochs {
            let s = trainer.run_epoch(&train)?;
            let rows = evaluate_records(&trainer.model, &test, 10, 0)?;
            let r = EvalReport::from_rows(&rows, Some(0));
            let fmt = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.4}"));
            println!(
                "  epoch {:>2} loss {:.4} train_acc {:.3} | test auc {} acc {} dice {} refused {}  ({:.0}s)",
                s.epoch,
                s.total,
                s.accuracy,
                fmt(r.auc),
                fmt(r.accuracy),
                fmt(r.mean_dice),
                r.refusals,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
