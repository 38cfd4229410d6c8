//! Open-set semi-supervised training on synthetic vector data with
//! free-energy outlier scoring.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod rng;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
