//! Desk-scale membership-inference auditing toolkit.
//!
//! Trains small bias-free ReLU classifiers, reconstructs their weights as a
//! nonnegative combination of per-candidate margin gradients, and scores pool
//! candidates by their optimized coefficients, with gradient-norm and
//! loss-threshold baselines and TPR-at-low-FPR evaluation.

pub mod blocks;
pub mod data;
pub mod nn;
pub mod scalar;
pub mod seed;
pub mod solver;

pub use scalar::Scalar;

/// Working precision of the pipeline.
pub type Real = f64;

/// Flat parameter vector at working precision.
pub type ParamVec = nn::ParamVector<Real>;
