//! Univariate and bivariate Gaussian random fields with sparse precision
//! matrices, built by discretizing (triangular systems of) SPDEs with
//! linear finite elements.
//!
//! The crate covers the full pipeline around that construction:
//!
//! - [`mesh`] / [`fem`]: triangulation of the study region and the lumped
//!   mass and stiffness matrices every operator is assembled from.
//! - [`spde`]: sparse precision matrices for Matérn fields and for the
//!   two-field triangular system whose cross-correlation sign follows the
//!   sign of the coupling weight.
//! - [`model`] / [`inference`]: the hierarchical regression model (year
//!   effects, elevation and distance-to-ocean covariates, fixed Gaussian
//!   noise) and hyperparameter-posterior maximization via sparse LDL^T
//!   factorizations.
//! - [`preprocess`]: Box-Cox transformation of humidity and empirical
//!   variograms with Matérn fits.
//! - [`evaluation`]: MAE/MSE/CRPS scoring and the hold-out validation
//!   harness comparing the independent and bivariate models.
//! - [`simulate`]: synthetic data generation from the generative model.
//! - [`io`] / [`pipeline`]: file formats, run configuration, and the
//!   command implementations behind the `bifield` binary.

pub mod dense;
pub mod error;
pub mod evaluation;
pub mod fem;
pub mod inference;
pub mod io;
pub mod mesh;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod simulate;
pub mod sparse;
pub mod spde;
pub mod special;

pub use error::{Error, Result};
