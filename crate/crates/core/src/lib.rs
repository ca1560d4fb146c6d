//! Core library for decomposing a dense FFN into a mixture of low-rank
//! experts, fine-tuning it on merged multi-task data with a quality-retaining
//! distillation objective and a fading soft router, and folding the result
//! back into a dense FFN with verified equivalence.

pub mod analysis;
pub mod archive;
pub mod config;
pub mod error;
pub mod linalg;
pub mod model;
pub mod moefy;
pub mod mole;
pub mod qr;
pub mod taskdata;
pub mod verify;

pub use error::{Error, Result};
