pub mod artifact;
pub mod classifier;
pub mod datagen;
pub mod dvae;
pub mod error;
pub mod explainer;
pub mod infotheory;
pub mod intervention;
pub mod nn;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
