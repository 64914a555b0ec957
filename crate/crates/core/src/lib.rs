//! Generalized multilayer latent space model for directed networks.
//!
//! A multilayer network on `n` nodes and `T` layers is stored as an
//! `n × n × T` tensor. Each edge value follows an exponential-family law whose
//! natural parameter is
//!
//! ```text
//! x_ijt = θ_i' Λ_t φ_j + β_it + α_jt
//! ```
//!
//! where `θ_i` and `φ_j` are sending/receiving latent positions, `Λ_t` is the
//! connection matrix of layer `t`, and `α`, `β` are low-rank degree terms.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: order-3 tensors, mode unfoldings, Tucker reconstruction and
//!   the two-sided centering operator.
//! - [`family`]: Gaussian, Poisson and Bernoulli-logistic edge likelihoods.
//! - [`factor`]: constrained low-rank maximum likelihood for one unfolding.
//! - [`estimate`]: the unfolding-and-fusion estimator for `Θ`, `Φ` and `Λ_t`.
//! - [`inference`]: sandwich covariances, confidence intervals, layer tests
//!   and change-point scans.
//! - [`simgen`]: synthetic parameter/network generation, sign alignment and
//!   coverage experiments.
//! - [`io`]: tensor files, CSV reports and run configuration.

pub mod error;
pub mod estimate;
pub mod factor;
pub mod family;
pub mod inference;
pub mod io;
pub(crate) mod linalg;
pub mod simgen;
pub mod tensor;
pub mod tolerance;

pub use error::{Error, Result};
pub use estimate::{estimate, FitDiagnostics, FitResult};
pub use factor::{FactorPair, FitConfig, ModeFit, SignConvention};
pub use family::{FamilyKind, FamilySpec};
pub use inference::{InferenceContext, SandwichCov, TestResult};
pub use simgen::{CoreKind, CoreSequence, GenOptions, ModelParams};
pub use tensor::{CenteringOps, Mode, Tensor3};
pub use tolerance::Tolerances;
