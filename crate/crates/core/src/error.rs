use thiserror::Error;

use crate::numcore::NumError;
use crate::synthworld::SynthError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("timestep {0} outside [0, 1]")]
    Timestep(f64),
    #[error("horizon {horizon} exceeds the configured maximum {max}")]
    Horizon { horizon: usize, max: usize },
    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { step: usize, term: &'static str },
    #[error("{0}")]
    Format(String),
    #[error("run {variant} (seed {seed}) failed: {source}")]
    Run { variant: String, seed: u64, source: Box<Error> },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;
