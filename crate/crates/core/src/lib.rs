//! Spectral representation learning for causal estimation with hidden
//! confounders: contrastive factorization of conditional densities followed
//! by convex-concave saddle-point estimation, for instrumental-variable
//! regression (IV), IV with observed confounders (IV-OC) and proxy causal
//! learning (PCL).

// Dense kernels index several arrays per loop, and `!(x > 0.0)` rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod benchdata;
pub mod checkpoint;
pub mod checks;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod neuralnet;
pub mod rng;
pub mod saddle;
pub mod spectral_rep;

pub use error::{Error, Result};
