//! Dense reverse-mode differentiation on small `f64` matrices.
//!
//! Graphs are define-by-run: each training step builds a fresh [`Graph`],
//! every operation evaluates eagerly and records its inputs, and
//! [`Graph::backward`] walks the tape once in reverse to accumulate adjoints
//! into the trainable leaves.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry, CheckpointManifest};
pub use gradcheck::{gradcheck, GradcheckReport, ParamCheck};
pub use graph::{Axis, BatchNormMode, Gradients, Graph, Var, LEAKY_SLOPE};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};

/// Variance floor for batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Momentum for running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;
