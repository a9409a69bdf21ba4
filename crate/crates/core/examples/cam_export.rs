//! Writes the malignancy evidence map of one nodule as a PRVX volume.
//!
//! `cargo run --release --example cam_export -- [run-dir] [out.prvx]`
//!
//! `run-dir` holds `final.dspc` and `run.cfg` from a training run; without it
//! an untrained desk model is used.

use std::path::PathBuf;

use fcdx::cohort::synthesize;
use fcdx::eval::{export_cam, prior_mean};
use fcdx::train::{TrainConfig, FINAL, RUN_CFG};
use fcdx::volume::write_volume;
use fcdx::{Model, ModelConfig};

fn main() -> fcdx::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next().map(PathBuf::from) {
        Some(dir) => Model::<f32>::load(&TrainConfig::load(dir.join(RUN_CFG))?.model, dir.join(FINAL))?,
        None => Model::new(&ModelConfig::desk(), 0)?,
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fcdx-cam.prvx"));

    let crop = synthesize(0, 2, 0.1).record.crop;
    let f = prior_mean(&model, &crop)?;
    let cam = export_cam(&model, &crop, &f)?;
    match cam.extraction.cloud() {
        Some(cloud) => {
            let outside = cam.map.data.iter().enumerate().filter(|(i, &v)| v != 0.0 && !cloud.indices.contains(i)).count();
            let peak = cam.map.data.iter().copied().fold(0.0f32, f32::max);
            println!("cloud of {} points, peak evidence {peak:.3}, {outside} nonzero voxels outside the cloud", cloud.len());
        }
        None => println!("refused: soft volume {:.1}, map is all zero", cam.extraction.volume),
    }
    write_volume(&out, &cam.map)?;
    println!("map written to {}", out.display());
    Ok(())
}
