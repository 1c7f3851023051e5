//! Two-stage class-incremental novel class discovery on dense feature
//! vectors: supervised pretraining with per-class Gaussian prototypes,
//! then rank-statistics discovery trained jointly with feature replay,
//! feature distillation, and self-training behind a single classifier
//! that answers over old and new classes without task hints.

pub mod assignment;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod prototypes;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
