//! Numerical laboratory for emergent equivariance in ensembles.
//!
//! The crate builds finite groups and their unitary representations on
//! network layer spaces, lifts them to the parameter space of layered
//! networks, and trains ensembles with projected (stochastic) gradient
//! descent under group augmentation. Every symmetry statement the library
//! relies on is available as an executable check: representation laws,
//! invariance of architecture spaces, equivariance of the projection,
//! the induced-representation identity of forward evaluation, gradient
//! equivariance, trajectory lockstep under the group action, and the
//! exact coupled-run surrogate for equivariance in distribution of SGD.
//!
//! Entry points:
//! - [`group`]: finite groups, Haar sampling, representations.
//! - [`paramspace`]: affine architecture spaces, lifted representations,
//!   projections, invariance checkers.
//! - [`network`]: forward evaluation and reverse-mode gradients.
//! - [`training`]: augmented risks, projected GD/SGD, invariant init,
//!   the coupled SGD replay.
//! - [`ensemble`]: ensemble mean models, orbit symmetrization, OSP and
//!   symmetric-KL metrics.
//! - [`data`]: MNIST IDX / CIFAR-10 binary loaders, exact rotations,
//!   synthetic sets.
//! - [`cli`]: the batch front-end behind the `equiflow` binary.
//!
//! Most capabilities have a runnable demo under `examples/`.

pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod group;
pub mod network;
pub mod paramspace;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Largest flattened layer dimension for which dense matrices are materialized.
pub const DENSE_CAP: usize = 4096;

/// Absolute tolerance for exact permutation identities.
pub const TOL_EXACT: f64 = 1e-12;
/// Absolute tolerance for composed floating-point pipelines.
pub const TOL_PIPELINE: f64 = 1e-10;
/// Residuals above this are treated as a clear invariance violation.
pub const TOL_VIOLATION: f64 = 0.1;
