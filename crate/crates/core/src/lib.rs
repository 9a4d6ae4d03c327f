//! Desk-scale model merging toolkit.
//!
//! Trains small MLP classifiers on synthetic task suites, collects per-layer
//! curvature statistics (diagonal Fisher, input/output-gradient Gram matrices,
//! exact Fishers for small vector parameters), and merges the resulting
//! checkpoints either with closed-form methods (averaging, task arithmetic,
//! TIES, diagonal Fisher merging, RegMean) or by solving each method's
//! per-layer linear system `(Σ_m C_m) x = Σ_m C_m θ_m` with conjugate
//! gradient — including the block-diagonal Fisher objective whose system
//! matrix is a sum of Kronecker products and has no tractable closed form.

pub mod checkpoint;
pub mod error;
pub mod fisher;
pub mod merge;
pub mod mlp;
pub mod rng;
pub mod solver;
pub mod synth;
pub mod tensor;

pub use error::{MatsError, Result};
