//! Pattern design for multi-user continuous-aperture MIMO downlinks.
//!
//! A transmitter with a continuous planar aperture radiates one current
//! pattern per user. Patterns are designed in the wavenumber domain: every
//! pattern is expanded on a truncated orthonormal Fourier basis over the
//! aperture, the free-space channel is projected on the same basis, and a
//! weighted-MMSE block coordinate descent maximizes the downlink sum-rate
//! over the projection coefficients.
//!
//! The crate is organised bottom-up:
//!
//! - [`em`]: constants, aperture sampling, dyadic Green kernels.
//! - [`wavenumber`]: Fourier basis and the pattern/coefficient transforms.
//! - [`metrics`]: transmit power, fields, interference, rates and MSEs.
//! - [`closed_form`]: the single-user optimum used as an oracle.
//! - [`solver`]: the block coordinate descent designer.
//! - [`baselines`]: match filtering, patch-array digital MIMO, the
//!   interference-free bound.
//! - [`experiments`]: scenarios, sweeps and result files.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod closed_form;
pub mod em;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod metrics;
pub mod solver;
pub mod wavenumber;

use num_complex::Complex64;

pub use error::{Error, Result};

/// Complex 3-vector: a current density, field, or combiner.
pub type Complex3 = nalgebra::Vector3<Complex64>;

/// Complex 3x3 matrix: a Green kernel sample or a wavenumber-domain channel block.
pub type ComplexMat3 = nalgebra::Matrix3<Complex64>;

/// Per-user pattern samples `θ_k(s_i)`, indexed `[k][i]`.
pub type PatternSet = Vec<Vec<Complex3>>;

/// Per-user receive combiners `ψ_k`.
pub type Combiners = Vec<Complex3>;
