//! # carmm
//!
//! Bayesian disease mapping with conditional-autoregressive (CAR) priors pushed
//! through multiple-membership (MM) weight matrices.
//!
//! The crate covers the whole workflow:
//!
//! - [`graph`]: areal adjacency graphs, lattice generation and Moran's I.
//! - [`car`]: proper CAR and intrinsic ICAR priors with an eigenvalue
//!   log-determinant, exact prior draws and (C, M) pair extraction.
//! - [`membership`]: multiple-membership matrices, their simulation, left
//!   inverses and covariance pushforward/recovery.
//! - [`model`]: Poisson and negative-binomial GLM-MM log posteriors with
//!   analytic gradients under the *post* and *inverse* parameterisations.
//! - [`sampler`]: multi-chain Hamiltonian Monte Carlo with warmup adaptation.
//! - [`diagnostics`]: split-R̂, ESS and SBC rank machinery.
//! - [`scoring`]: posterior predictive p-values, PSIS-LOO, RPS, DSS.
//! - [`sbc`]: simulation-based calibration studies.
//! - [`cli`]: the `simulate` / `fit` / `sbc` / `score` workflows behind the
//!   `carmm` binary.
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --release --example
//! <name>` runs any of them.

pub mod car;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod membership;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod sbc;
pub mod scoring;

pub use car::{CarPair, CarParams, CarPrior};
pub use error::{Error, Result};
pub use graph::{Adjacency, AdjacencyGraph};
pub use membership::MembershipMatrix;
pub use model::{Likelihood, ModelSpec, ParamVector, Parameterisation, Priors, Spatial};
pub use sampler::{PosteriorSamples, SamplerConfig};
