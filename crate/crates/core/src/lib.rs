//! Multi-scale cluster contrast with teacher-guided distillation for
//! unsupervised re-identification on small vector datasets.

pub mod checkpoint;
pub mod clustering;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod memory;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
