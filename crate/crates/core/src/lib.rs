//! Complier average causal effects from instrumental-variable data with
//! nonignorably missing categorical covariates.
//!
//! The model treats compliance class as a latent variable and lets covariate
//! missingness depend on the outcome, the instrument (for compliers) and the
//! latent class. Parameters are fitted by EM; see [`em`] for the algorithm and
//! [`model`] for the factorization of the joint law.

pub mod baselines;
pub mod em;
pub mod error;
pub mod estimands;
pub mod glm;
pub mod io;
pub mod model;
pub mod report;
pub mod sensitivity;
pub mod simulation;

pub use em::{fit_em, tabulate_observed, FitConfig, FitResult, MissingnessModel, ObservedCounts};
pub use error::{Error, Result};
pub use estimands::{bootstrap_ci, BootstrapConfig, CaceReport, Target};
pub use model::{cace, ComplianceClass, Covariate, CovariateSpec, Encoding, ParamSet, Record};
