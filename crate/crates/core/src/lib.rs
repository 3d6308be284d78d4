//! Ensembles of sparse neural networks trained from scratch with dynamic
//! sparse training.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense row-major matrices and a seeded, stream-splittable RNG.
//! * [`network`]: masked multilayer perceptron, manual backprop, SGD with momentum.
//! * [`sparsity`]: layer-wise density allocation, magnitude pruning, gradient or
//!   random regrowth, and the large global perturbation used between refinement phases.
//! * [`training`]: independent-member ensembles (one run per member), the
//!   single-run explore-then-refine ensemble, and the static-mask baseline.
//! * [`evaluation`]: ensemble averaging, accuracy, NLL, ECE, noise corruption,
//!   out-of-distribution AUC and FGSM robustness.
//! * [`diversity`]: disagreement, KL divergence and accuracy correlations.
//! * [`flops`]: analytic FLOPs cost model.
//! * [`data`], [`ticket_file`], [`config`], [`report`], [`cli`]: ingestion,
//!   persistence and the experiment command line.

pub mod cli;
pub mod config;
pub mod data;
pub mod diversity;
pub mod error;
pub mod evaluation;
pub mod flops;
pub mod network;
pub mod report;
pub mod sparsity;
pub mod tensor;
pub mod ticket_file;
pub mod training;

pub use error::{Error, Result};
pub use network::{Gradients, LayerShape, OptimizerState, SparseNetwork};
pub use sparsity::{ExplorationConfig, Growth, MaskSet, RateSchedule};
pub use tensor::{Matrix, Rng};
pub use training::{ScheduleConfig, Ticket, TrainLog};

/// Lower clamp applied to every probability before a logarithm is taken.
pub const PROB_EPS: f64 = 1e-12;
