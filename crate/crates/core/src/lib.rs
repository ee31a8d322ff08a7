//! Blind face restoration with a style-based generative prior.

pub mod codec;
pub mod config;
pub mod container;
pub mod degradation;
pub mod discriminator;
pub mod error;
pub mod extractor;
pub mod generator;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod mmrb;
pub mod model;
pub mod nn;
pub mod roi;
pub mod seed;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{FeatureMap, ImageTensor};
