pub mod cli;
pub mod codec;
pub mod datagen;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod scheduler;
pub mod selftest;
pub mod trainer;

pub use error::{Error, Result};
