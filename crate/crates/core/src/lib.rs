//! Core building blocks for semi-supervised bitemporal change detection:
//! dense tensors with reverse-mode autodiff, a finite-difference gradient
//! oracle, named seeded random streams, shared value types and the
//! IoU / overall-accuracy metrics.

pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod types;

pub use autograd::{Gradients, Tape, Var};
pub use error::{CoreError, Result};
pub use metrics::{ConfusionMatrix, ResultsTable};
pub use real::Real;
pub use tensor::Tensor;
pub use types::{BitemporalSample, BranchOutputs, DatasetPartition, DecoderVariant, HeadChoice, LrSchedule, Mask, TrainConfig};
