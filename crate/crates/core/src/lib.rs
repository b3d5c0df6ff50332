//! Low-rank momentum training that keeps its curvature and saliency
//! statistics, and a merging engine that reuses them to combine several
//! task-specific models trained from a shared initialisation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense matrices, truncated SVD, norms and spectral statistics
//! - [`optimizer`]: the factorized-momentum training step
//! - [`tasks`]: synthetic tasks with closed-form losses and gradients
//! - [`merge`]: masking, sign election and curvature-weighted aggregation
//! - [`analysis`]: spectral logs, excess loss and memory accounting
//! - [`checkpoint`]: the binary tensor container and JSON config/report IO
//! - [`experiment`]: config-driven training runs

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod merge;
pub mod optimizer;
pub(crate) mod rng;
pub mod tasks;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use tensor::{Matrix, SvdFactors};
