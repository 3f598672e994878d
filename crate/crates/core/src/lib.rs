//! Random neural fields: multilayer networks whose initial weights are drawn
//! from spatially correlated Gaussian processes on the 1-torus and masked by
//! fixed receptive fields, together with the tooling to study them in the
//! tangent-kernel regime.
//!
//! The crate is organised bottom-up:
//!
//! * [`covariance`] — torus covariance functions, lattice covariance matrices
//!   and their square-root factors.
//! * [`fields`] — receptive-field masks and correlated weight sampling.
//! * [`network`] — the discretized network, forward and reverse passes.
//! * [`tangent`] — empirical tangent kernels, linearized dynamics and kernel
//!   regression.
//! * [`trainer`] — label encoding, losses, full-batch gradient descent and the
//!   comparison against the linearized prediction.
//! * [`perturb`] — input perturbations and the relative kernel distance.
//! * [`data`] — MNIST IDX files, subsampling and experiment records.
//! * [`experiments`] — the end-to-end drivers shared by the CLI and bindings.
//!
//! Matrices follow one convention internally: activations are stored
//! feature-major (one column per example) so that layer products are plain
//! GEMMs; public entry points take and return example-major `N × features`
//! data.

pub mod bessel;
pub mod covariance;
pub mod data;
pub mod error;
pub mod experiments;
pub mod fields;
pub mod network;
pub mod perturb;
mod quad;
pub mod seed;
pub mod tangent;
pub mod trainer;

pub use covariance::{CovarianceFamily, CovarianceSpec, FactorKind};
pub use error::{ErrorKind, Result, RnfError};
pub use fields::{ReceptiveFieldFamily, ReceptiveFieldSpec, WeightBundle};
pub use network::{Activation, ForwardTrace, LayerSpec, ModelConfig, NetworkModel, SigmaParams};
pub use tangent::{KernelMode, LinearizedState, TangentFeatures, TangentKernel, TimeMode};

pub use faer::Mat;

pub(crate) fn par() -> faer::Par {
    faer::get_global_parallelism()
}
