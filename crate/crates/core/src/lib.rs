//! Variational inference for truncated stick-breaking Dirichlet-process
//! Gaussian mixtures, with linear-response sensitivity of posterior
//! cluster-count summaries to the stick-breaking prior.
//!
//! The pipeline is: fit `η_θ*` by minimizing the profiled KL
//! ([`optimize`]), factorize its Hessian once ([`sensitivity::build_pack`]),
//! extrapolate the optimum for prior perturbations
//! ([`sensitivity::extrapolate`]), and evaluate cluster-count summaries on
//! either refit or extrapolated parameters ([`quantities::g_of_eta`]).

pub mod app;
pub mod diff;
pub mod error;
mod linalg;
pub mod model;
pub mod objective;
pub mod optimize;
pub mod perturbation;
pub mod quantities;
pub mod quadrature;
pub mod sensitivity;
pub mod variational;

pub use error::{Error, Result};
