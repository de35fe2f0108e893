pub mod align;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod error;
pub mod experts;
pub mod flowmatch;
pub mod format;
pub mod metrics;
pub mod numcore;
pub mod params;
pub mod rng;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};

/// f32 instantiations used by training and the CLI.
pub type Tensor32 = numcore::Tensor<f32>;
pub type Backbone32 = backbone::Backbone<f32>;
pub type ProjectorBank32 = align::ProjectorBank<f32>;
pub type Trainer32 = trainer::Trainer<f32>;
