//! Decoding multichannel sEMG articulation signals on the manifold of
//! symmetric positive definite matrices.
//!
//! Windowed channel covariances ("edge matrices") are mapped to Cholesky
//! space, where the log-Cholesky metric gives closed-form distances and
//! means. On top of that geometry the crate provides minimum-distance-to-mean
//! and k-medoids decoders, a trainable SPD network (BiMap/ReEig/LogEig) with
//! Stiefel-constrained weights, a manifold GRU with an ODE-evolved hidden
//! state, and diagnostic analyses of trained weights.

// Comparisons like `!(x > 0.0)` are written that way on purpose: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod decoders;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod gru;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod spdnet;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
pub use geometry::{CholeskyPoint, SplitPair, TriangularTangent};
pub use linalg::{EigPair, SymMatrix};
