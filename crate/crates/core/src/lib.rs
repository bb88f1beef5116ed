pub mod audio;
pub mod augment;
pub mod autodiff;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod featurize;
pub mod model;
pub mod training;

pub use error::{Error, Result};
