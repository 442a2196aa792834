//! Spectral mesh tokenization and a patch-based mesh transformer.
//!
//! The pipeline: load and normalize a triangle mesh, assemble its cotangent
//! Laplacian and mass matrix, solve the generalized eigenproblem, compute
//! heat-kernel-signature features, partition the mesh into patches by
//! root-node selection, build geodesic attention masks between the patch
//! supernodes, and train a small transformer over the patch tokens with a
//! from-scratch float64 autodiff tape.

pub mod error;
pub mod linalg;
pub mod mesh;
pub mod rng;
pub mod sparse;
pub mod spectral;
pub mod tokenize;
pub mod geodesic;
pub mod gradcheck;
pub mod autodiff;
pub mod layers;
pub mod model;
pub mod cache;
pub mod dataset;
pub mod train;

pub use error::{Error, Result};
