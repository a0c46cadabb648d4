//! Correlation tomography for random potentials.
//!
//! The exterior data `D^k` of a random potential `V` is the expected product
//! of `k` leading-front jump amplitudes of scattered plane waves, each equal
//! to half the line integral of `V` along the detector ray. This crate
//! simulates that data from seeded ensembles, inverts it for the moment maps
//! `M^k(x_1, …, x_k) = E ∏ V(x_j)` via an `n·k`-dimensional Radon inversion,
//! and compares laws of random fields through finite moment projections.
//!
//! Module map:
//!
//! - [`field_models`]: tapered Gaussian and finite-rank ensembles, exact moments
//! - [`xray`]: line integrals, progressive-expansion coefficients, jump amplitudes
//! - [`correlation_data`]: tangent-bundle data sets, mollification, brute-force oracle
//! - [`reconstruction`]: frames, hyperplane assembly, filtered backprojection
//! - [`law_recovery`]: Gaussian law estimates, moment projections, law comparison
//! - [`wave`]: 1+1-dimensional time-domain check of the jump identity
//! - [`formats`], [`config`]: binary file formats and experiment configuration

pub mod config;
pub mod correlation_data;
pub mod error;
pub mod field_models;
pub mod formats;
pub mod grid;
pub mod law_recovery;
pub mod moment;
pub mod numeric;
pub mod phantoms;
pub mod reconstruction;
pub mod wave;
pub mod xray;

pub use error::{Error, Result};
pub use grid::{Geometry, Grid};
pub use moment::MomentGrid;
