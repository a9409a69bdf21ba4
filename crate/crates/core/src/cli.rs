//! The `fcdx` command line. Exit codes: 0 success, 1 selftest failure,
//! 2 usage, 3 I/O, 4 data or config.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::builder::RangedU64ValueParser;
use clap::{Parser, Subcommand};
use fcdx_tensor::StreamKey;

use crate::cohort::{generate_cohort, summary, Manifest, FOLDS};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_cam, infer, prior_mean, DEFAULT_SAMPLES};
use crate::model::Model;
use crate::train::{run_training, Scheme, TrainConfig, RUN_CFG};
use crate::volume::{read_volume, write_volume};
use crate::{selftest, ModelConfig};

#[derive(Debug, Parser)]
#[command(name = "fcdx", version, about = "Lesion diagnosis from feature clouds with an ambiguity prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multi-rater cohort.
    GenCohort {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0.3)]
        ambiguity: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one fold.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        /// key=value run config; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["low", "high"])]
        scheme: Option<String>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(0..FOLDS as u64))]
        fold: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the saved state in `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate per-fold checkpoints `<ckpt-dir>/fold<k>/` on their test folds.
    Eval {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SAMPLES, value_parser = RangedU64ValueParser::<usize>::new().range(1..))]
        n_samples: usize,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated folds; all five by default.
        #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u64).range(0..FOLDS as u64))]
        folds: Option<Vec<u64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Diagnose one normalized crop.
    Infer {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Run config with the model shape; defaults to run.cfg beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SAMPLES, value_parser = RangedU64ValueParser::<usize>::new().range(1..))]
        n_samples: usize,
        #[arg(long)]
        cam_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the built-in invariant checks.
    Selftest {
        #[arg(long, hide = true)]
        perturb_softmax: bool,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenCohort { out, n, ambiguity, seed } => {
            let m = generate_cohort(&out, n as usize, ambiguity, seed)?;
            println!("{}", summary(&m.load_records()?));
        }
        Command::Train { cohort, config, scheme, fold, seed, out, resume } => {
            let mut cfg = match &config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    let mut c = TrainConfig::default();
                    c.apply_kv(&text)?;
                    c
                }
                None => TrainConfig::default(),
            };
            if let Some(s) = scheme {
                cfg.scheme = Scheme::parse(&s)?;
            }
            if let Some(f) = fold {
                cfg.fold = f as usize;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let manifest = Manifest::load(&cohort)?;
            manifest.validate()?;
            let records = manifest.load_records()?;
            println!("{}", crate::train::METRICS_HEADER);
            run_training(&cfg, &records, &out, resume, |s| println!("{}", s.csv_row()))?;
            println!("checkpoints written to {}", out.display());
        }
        Command::Eval { cohort, ckpt_dir, n_samples, out, folds, seed } => {
            let manifest = Manifest::load(&cohort)?;
            manifest.validate()?;
            let records = manifest.load_records()?;
            let folds: Vec<usize> = match folds {
                Some(f) => f.into_iter().map(|k| k as usize).collect(),
                None => (0..FOLDS).collect(),
            };
            let ev = evaluate(&records, &ckpt_dir, &folds, n_samples, seed)?;
            let csv = ev.write(&out)?;
            let resolved = out.with_extension("cfg");
            let list: Vec<String> = folds.iter().map(usize::to_string).collect();
            let text = format!(
                "cohort={}\nckpt_dir={}\nn_samples={n_samples}\nfolds={}\nseed={seed}\n",
                cohort.display(),
                ckpt_dir.display(),
                list.join(",")
            );
            fs::write(&resolved, text).map_err(|e| Error::io(&resolved, e))?;
            println!("{}", serde_json::to_string(&ev.to_json()).expect("report serializes"));
            eprintln!("rows written to {}", csv.display());
        }
        Command::Infer { volume, ckpt, config, n_samples, cam_out, seed } => {
            let model_cfg = model_config_for(&ckpt, config.as_deref())?;
            let model = Model::<f32>::load(&model_cfg, &ckpt)?;
            let crop = read_volume(&volume)?;
            let out = infer(&model, &crop, n_samples, &mut StreamKey::root(seed).child("infer").stream())?;
            let mut json = out.to_json();
            json["n_samples"] = n_samples.into();
            json["seed"] = seed.into();
            if let Some(path) = cam_out {
                let f = prior_mean(&model, &crop)?;
                write_volume(&path, &export_cam(&model, &crop, &f)?.map)?;
                json["cam"] = path.display().to_string().into();
            }
            println!("{}", serde_json::to_string(&json).expect("output serializes"));
        }
        Command::Selftest { perturb_softmax } => {
            let checks = selftest::run(&selftest::Options { perturb_softmax })?;
            print!("{}", selftest::table(&checks));
            if !checks.iter().all(selftest::Check::passed) {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn model_config_for(ckpt: &Path, config: Option<&Path>) -> Result<ModelConfig> {
    let path = match config {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(RUN_CFG),
    };
    if !path.exists() {
        return Err(Error::Config(format!("no run config at {}; pass --config", path.display())));
    }
    Ok(TrainConfig::load(&path)?.model)
}
