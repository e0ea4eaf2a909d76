//! Per-taxon generalized linear models over a shared design matrix, the
//! multivariate sum-of-likelihood-ratio test statistic, randomized normal-score
//! residuals, and diagnostic tables.

pub mod diagnostics;
pub mod family;
pub mod irls;
pub mod manyglm;
pub mod model_matrix;
pub mod residuals;

pub use diagnostics::{diagnostics, DiagnosticsTables};
pub use family::{CdfTable, Family};
pub use irls::{fit_taxon, FitControls, TaxonFit};
pub use manyglm::{
    fit_manyglm, fit_manyglm_with_dispersions, lr_statistic, ManyGlmFit, TestStatistic,
};
pub use model_matrix::{build_model_matrix, ModelMatrix, TermInfo};
pub use residuals::ds_residuals;
