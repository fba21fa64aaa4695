//! Reconstruction of undirected Gaussian graphical networks from expression
//! data with a Bayesian simultaneous-equation model.
//!
//! Each gene is regressed on all others under a ridge-type prior whose
//! precision has a gene-specific gamma distribution (local shrinkage) with
//! hyperparameters shared across genes (global shrinkage). Posteriors are fit
//! by variational Bayes, the shared hyperparameters by empirical Bayes, and
//! edges are chosen by forward selection on Bayes factors along a ranking of
//! standardized posterior means.
//!
//! Modules:
//! - [`data`]: ingestion, standardization, per-gene problems, SVD reduction
//! - [`vb`]: per-equation variational fit
//! - [`eb`]: variational EM over all genes with empirical-Bayes hyperparameters
//! - [`select`]: edge ranking, Bayes factors and forward selection
//! - [`sim`]: synthetic graphs, precision matrices and Gaussian samples
//! - [`pipeline`]: the end-to-end inference used by the front end
//! - [`bench`]: metrics, simulation driver and split/stability harness

pub mod bench;
pub mod data;
pub mod eb;
pub mod error;
pub mod pipeline;
pub mod select;
pub mod sim;
pub mod vb;

pub use error::{Error, ErrorClass, Result};
