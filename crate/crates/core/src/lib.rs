//! Spatio-directional tangent-space Gaussian mixtures for path guiding.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsdf_mixture;
pub mod conditioned;
pub mod em;
pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod image;
pub mod integrator;
pub mod linalg;
pub mod materials;
pub mod mixture;
pub mod model_init;
pub mod par;
pub mod scene;
pub mod serialize;
pub mod spatial;
