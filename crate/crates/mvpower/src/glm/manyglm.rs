//! Fitting all taxa over a shared design matrix, and the multivariate
//! sum-of-likelihood-ratio test statistic.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::glm::family::Family;
use crate::glm::irls::{fit_taxon, FitControls, TaxonFit};
use crate::glm::model_matrix::ModelMatrix;
use crate::ingest::AbundanceMatrix;

/// Joint fit of independent per-taxon GLMs sharing one model matrix.
///
/// Immutable once constructed; cheap to share across threads (the data and
/// design are held by `Arc`).
#[derive(Debug, Clone)]
pub struct ManyGlmFit {
    y: Arc<AbundanceMatrix>,
    x: Arc<ModelMatrix>,
    family: Family,
    /// k x p coefficient matrix (rows follow the model-matrix columns).
    coefficients: DMatrix<f64>,
    /// Per-taxon dispersion (negative binomial only).
    dispersions: Option<Vec<f64>>,
    /// n x p fitted means.
    fitted: DMatrix<f64>,
    loglik: Vec<f64>,
    converged: Vec<bool>,
    degenerate: Vec<bool>,
}

impl ManyGlmFit {
    pub fn data(&self) -> &Arc<AbundanceMatrix> {
        &self.y
    }

    pub fn model_matrix(&self) -> &Arc<ModelMatrix> {
        &self.x
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn n_taxa(&self) -> usize {
        self.coefficients.ncols()
    }

    pub fn n_coefficients(&self) -> usize {
        self.coefficients.nrows()
    }

    /// k x p coefficient matrix.
    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn dispersions(&self) -> Option<&[f64]> {
        self.dispersions.as_deref()
    }

    /// n x p fitted means.
    pub fn fitted_means(&self) -> &DMatrix<f64> {
        &self.fitted
    }

    pub fn loglik(&self) -> &[f64] {
        &self.loglik
    }

    pub fn loglik_total(&self) -> f64 {
        self.loglik.iter().sum()
    }

    pub fn converged(&self) -> &[bool] {
        &self.converged
    }

    pub fn degenerate(&self) -> &[bool] {
        &self.degenerate
    }

    pub fn taxon_names(&self) -> &[String] {
        self.y.taxon_names()
    }

    /// Linear predictors eta = X B (n x p).
    pub fn linear_predictors(&self) -> DMatrix<f64> {
        self.x.x() * &self.coefficients
    }
}

/// Fit every taxon independently, estimating negative-binomial dispersions by
/// profile maximum likelihood.
pub fn fit_manyglm(
    y: Arc<AbundanceMatrix>,
    x: Arc<ModelMatrix>,
    family: Family,
) -> Result<ManyGlmFit> {
    fit_manyglm_impl(y, x, family, None)
}

/// Fit every taxon with the negative-binomial dispersions pinned to `phi`
/// (one value per taxon). Used for null-model refits that reuse dispersions
/// estimated under the alternative.
pub fn fit_manyglm_with_dispersions(
    y: Arc<AbundanceMatrix>,
    x: Arc<ModelMatrix>,
    family: Family,
    phi: &[f64],
) -> Result<ManyGlmFit> {
    if family != Family::NegativeBinomial {
        return Err(Error::validation(
            "fixed dispersions only apply to the negative binomial family".to_string(),
        ));
    }
    if phi.len() != y.p() {
        return Err(Error::validation(format!(
            "{} dispersions supplied for {} taxa",
            phi.len(),
            y.p()
        )));
    }
    fit_manyglm_impl(y, x, family, Some(phi))
}

fn fit_manyglm_impl(
    y: Arc<AbundanceMatrix>,
    x: Arc<ModelMatrix>,
    family: Family,
    fixed_phi: Option<&[f64]>,
) -> Result<ManyGlmFit> {
    let n = y.n();
    let p = y.p();
    if x.n_rows() != n {
        return Err(Error::validation(format!(
            "model matrix has {} rows but the count matrix has {n}",
            x.n_rows()
        )));
    }
    let k = x.n_cols();
    let controls = FitControls::default();

    let mut coefficients = DMatrix::zeros(k, p);
    let mut fitted = DMatrix::zeros(n, p);
    let mut dispersions = family.has_dispersion().then(|| vec![0.0; p]);
    let mut loglik = vec![0.0; p];
    let mut converged = vec![false; p];
    let mut degenerate = vec![false; p];
    let mut column = vec![0.0; n];

    for j in 0..p {
        for i in 0..n {
            column[i] = y.counts()[(i, j)];
        }
        let phi_j = fixed_phi.map(|v| v[j]);
        let fit: TaxonFit = fit_taxon(&column, x.x(), family, phi_j, &controls, false)
            .map_err(|e| e.with_context(&format!("taxon '{}'", y.taxon_names()[j])))?;
        coefficients.column_mut(j).copy_from(&fit.beta);
        for i in 0..n {
            fitted[(i, j)] = fit.mu[i];
        }
        if let Some(d) = dispersions.as_mut() {
            d[j] = fit.phi.expect("negative binomial fit carries a dispersion");
        }
        loglik[j] = fit.loglik;
        converged[j] = fit.converged;
        degenerate[j] = fit.degenerate;
    }

    Ok(ManyGlmFit {
        y,
        x,
        family,
        coefficients,
        dispersions,
        fitted,
        loglik,
        converged,
        degenerate,
    })
}

/// Multivariate test statistic: sum over taxa of per-taxon likelihood-ratio
/// statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TestStatistic {
    pub value: f64,
    pub per_taxon: Vec<f64>,
}

/// Sum-of-LR statistic comparing a null fit against an alternative fit of the
/// same data. The null design must be nested in the alternative design.
pub fn lr_statistic(fit_null: &ManyGlmFit, fit_alt: &ManyGlmFit) -> Result<TestStatistic> {
    if fit_null.family != fit_alt.family {
        return Err(Error::validation(format!(
            "family mismatch: null is {}, alternative is {}",
            fit_null.family.label(),
            fit_alt.family.label()
        )));
    }
    let same_data = Arc::ptr_eq(&fit_null.y, &fit_alt.y) || fit_null.y == fit_alt.y;
    if !same_data {
        return Err(Error::validation(
            "null and alternative fits are not fits of the same count matrix".to_string(),
        ));
    }
    if !is_nested(fit_null.x.x(), fit_alt.x.x()) {
        return Err(Error::validation(
            "null design is not nested in the alternative design".to_string(),
        ));
    }
    let p = fit_null.n_taxa();
    let mut per_taxon = Vec::with_capacity(p);
    let mut value = 0.0;
    for j in 0..p {
        let lr = (2.0 * (fit_alt.loglik[j] - fit_null.loglik[j])).max(0.0);
        per_taxon.push(lr);
        value += lr;
    }
    Ok(TestStatistic { value, per_taxon })
}

/// True when every column of `x0` lies in the column span of `x1` (up to
/// numerical tolerance).
fn is_nested(x0: &DMatrix<f64>, x1: &DMatrix<f64>) -> bool {
    if x0.nrows() != x1.nrows() {
        return false;
    }
    // Orthonormalize x1's columns, then check x0's projection residuals.
    let n = x1.nrows();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for j in 0..x1.ncols() {
        let mut v: Vec<f64> = (0..n).map(|i| x1[(i, j)]).collect();
        for b in &basis {
            let d = dot(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= d * bi;
            }
        }
        let nrm = dot(&v, &v).sqrt();
        if nrm > 1e-10 {
            for vi in v.iter_mut() {
                *vi /= nrm;
            }
            basis.push(v);
        }
    }
    for j in 0..x0.ncols() {
        let mut v: Vec<f64> = (0..n).map(|i| x0[(i, j)]).collect();
        let orig = dot(&v, &v).sqrt();
        if orig == 0.0 {
            continue;
        }
        for b in &basis {
            let d = dot(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= d * bi;
            }
        }
        if dot(&v, &v).sqrt() > 1e-8 * orig {
            return false;
        }
    }
    true
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
