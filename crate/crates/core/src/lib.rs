//! Flexible patience-based early exiting for multi-exit transformer classifiers.
//!
//! The crate bundles a small autodiff engine, a multi-exit encoder, the
//! cross-layer similarity measures, halting policies, joint training, and an
//! evaluation harness that produces speedup/score curves.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod policy;
pub mod similarity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, MultiExitModel, TaskKind};
pub use policy::{ExitDecision, ExitPolicy, ExitReason, ExitTrace, PolicySpec};
pub use similarity::{Measure, ProbDist, SimilarityMeasure};
