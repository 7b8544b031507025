//! Speaker-embedding training objectives with analytic gradients, episodic
//! batch sampling, curriculum schedules and open-set EER evaluation.

pub mod checkpoint;
pub mod config;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod math;
pub mod objective;
pub mod optim;
pub mod report;
pub mod sampling;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
