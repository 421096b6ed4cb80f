//! Core library for the augmented-latent-intrinsics relighting pipeline.
//!
//! The pipeline synthesizes multi-illumination scenes with analytic ground
//! truth, learns a lighting/content decomposition from them, enriches the
//! content features with a frozen visual prior, decodes relit images through
//! a small conditional diffusion model, and scores everything with the
//! in-scene / cross-scene protocols and material-grouped metrics.

pub mod config;
pub mod datagen;
pub mod diffusion;
pub mod digest;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod inference;
pub mod losses;
pub mod nn;
pub mod numerics;
pub mod priors;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{AliError, Result};
