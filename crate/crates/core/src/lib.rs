pub mod backbone;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod dapa;
pub mod datagen;
pub mod detect;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod image;
pub mod linalg;
pub mod nn;
pub mod numcore;
pub mod optim;
pub mod plot;
pub mod pretrain;
pub mod rng;
pub mod spem;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
