//! Writes a synthetic multi-rater cohort and prints its fold and rating counts.
//!
//! `cargo run --release --example gen_cohort -- [out] [records] [ambiguity] [seed]`

use fcdx::cohort::{generate_cohort, summary, Manifest};

fn main() -> fcdx::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("fcdx-cohort").display().to_string());
    let n: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(25);
    let ambiguity: f64 = args.next().and_then(|v| v.parse().ok()).unwrap_or(0.3);
    let seed: u64 = args.next().and_then(|v| v.parse().ok()).unwrap_or(0);

    generate_cohort(&out, n, ambiguity, seed)?;
    let manifest = Manifest::load(&out)?;
    manifest.validate()?;
    let records = manifest.load_records()?;
    println!("{}", summary(&records));
    for r in records.iter().take(5) {
        let ratings: Vec<u8> = r.annotations.iter().map(|a| a.rating).collect();
        let voxels: Vec<usize> = r.annotations.iter().map(|a| a.mask.count()).collect();
        println!("{} fold {} ratings {ratings:?} mask voxels {voxels:?} low-ambiguity {}", r.id, r.fold, r.is_low_ambiguity());
    }
    println!("cohort written to {out}");
    Ok(())
}
