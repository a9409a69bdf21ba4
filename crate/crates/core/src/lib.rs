pub mod augment;
pub mod backbone;
pub mod cli;
pub mod cloud;
pub mod cohort;
pub mod config;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nsam;
pub mod prior;
pub mod selftest;
pub mod train;
pub mod volume;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::Model;
