//! Discrete-margin Gaussian copula with factor-analytic correlation:
//! estimation from pilot fits and simulation of new abundance matrices.
//!
//! Counts arise as y_ij = F_j^-1(Phi(z_ij)) where z rows are standard-normal
//! vectors with a low-rank correlation matrix scale(Lambda Lambda' + diag(Psi))
//! and F_j is taxon j's fitted marginal distribution.

pub mod factor;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::effects::CoefficientMatrix;
use crate::error::{Error, Result};
use crate::glm::family::{CdfTable, Family};
use crate::glm::manyglm::ManyGlmFit;
use crate::glm::model_matrix::ModelMatrix;
use crate::glm::residuals::ds_residuals;
use crate::ingest::AbundanceMatrix;
use factor::{fit_factor_model, FactorControls};

/// Free parameters of the factor-analytic correlation model:
/// p loadings per factor plus p uniquenesses, minus the q(q-1)/2 rotational
/// constraints: p(q+1) - q(q-1)/2.
pub fn fa_param_count(p: usize, q: usize) -> Result<usize> {
    if q >= p {
        return Err(Error::validation(format!(
            "factor count q = {q} must be smaller than the number of taxa p = {p}"
        )));
    }
    Ok(p * (q + 1) - q * q.saturating_sub(1) / 2)
}

/// Estimation metadata carried by a fitted copula.
#[derive(Debug, Clone)]
pub struct CopulaEstimation {
    /// Factor-model log-likelihood at the optimum (on the averaged score
    /// correlation matrix).
    pub loglik: f64,
    /// EM iterations used.
    pub iterations: usize,
    /// Number of residual randomizations averaged over.
    pub n_randomizations: usize,
    pub warnings: Vec<String>,
}

/// Options for [`fit_copula`].
#[derive(Debug, Clone)]
pub struct CopulaOptions {
    /// Residual randomizations averaged into the score correlation matrix.
    pub n_randomizations: usize,
    pub factor: FactorControls,
}

impl Default for CopulaOptions {
    fn default() -> Self {
        CopulaOptions {
            n_randomizations: 5,
            factor: FactorControls::default(),
        }
    }
}

/// Fitted Gaussian copula over the margins of a [`ManyGlmFit`].
#[derive(Debug, Clone)]
pub struct CopulaModel {
    loadings: DMatrix<f64>,
    uniquenesses: DVector<f64>,
    n_factors: usize,
    margins: ManyGlmFit,
    estimation: CopulaEstimation,
}

impl CopulaModel {
    /// Assemble and validate a model from parts. Loadings and uniquenesses are
    /// rescaled so the implied covariance has an exactly unit diagonal, and the
    /// result must be positive definite with the identifiability corner zeroed.
    pub fn from_parts(
        mut loadings: DMatrix<f64>,
        mut uniquenesses: DVector<f64>,
        margins: ManyGlmFit,
        estimation: CopulaEstimation,
    ) -> Result<CopulaModel> {
        let p = margins.n_taxa();
        let q = loadings.ncols();
        if loadings.nrows() != p {
            return Err(Error::validation(format!(
                "loadings have {} rows for {p} taxa",
                loadings.nrows()
            )));
        }
        if uniquenesses.len() != p {
            return Err(Error::validation(format!(
                "{} uniquenesses for {p} taxa",
                uniquenesses.len()
            )));
        }
        if q >= p {
            return Err(Error::validation(format!(
                "factor count q = {q} must be smaller than the number of taxa p = {p}"
            )));
        }
        for r in 0..q {
            for c in (r + 1)..q {
                if loadings[(r, c)] != 0.0 {
                    return Err(Error::validation(format!(
                        "identifiability requires loadings[{r}][{c}] = 0, got {}",
                        loadings[(r, c)]
                    )));
                }
            }
        }
        for j in 0..p {
            if !(uniquenesses[j].is_finite() && uniquenesses[j] > 0.0) {
                return Err(Error::validation(format!(
                    "uniqueness for taxon {j} must be positive, got {}",
                    uniquenesses[j]
                )));
            }
            let mut d = uniquenesses[j];
            for f in 0..q {
                d += loadings[(j, f)] * loadings[(j, f)];
            }
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::numeric(format!(
                    "implied variance for taxon {j} is {d}"
                )));
            }
            let s = d.sqrt();
            for f in 0..q {
                loadings[(j, f)] /= s;
            }
            uniquenesses[j] /= d;
        }
        let model = CopulaModel {
            loadings,
            uniquenesses,
            n_factors: q,
            margins,
            estimation,
        };
        // Positive definiteness of the implied correlation matrix.
        if model.correlation().cholesky().is_none() {
            return Err(Error::numeric(
                "implied correlation matrix is not positive definite".to_string(),
            ));
        }
        Ok(model)
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn uniquenesses(&self) -> &DVector<f64> {
        &self.uniquenesses
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    pub fn margins(&self) -> &ManyGlmFit {
        &self.margins
    }

    pub fn estimation(&self) -> &CopulaEstimation {
        &self.estimation
    }

    pub fn n_taxa(&self) -> usize {
        self.margins.n_taxa()
    }

    /// Implied correlation matrix Lambda Lambda' + diag(Psi), with the diagonal
    /// pinned to exactly 1.
    pub fn correlation(&self) -> DMatrix<f64> {
        let p = self.n_taxa();
        let mut sigma = &self.loadings * self.loadings.transpose();
        for j in 0..p {
            sigma[(j, j)] = 1.0;
        }
        sigma
    }
}

/// Average correlation matrix of normal-score residuals over several
/// randomizations.
fn score_correlation(
    fit: &ManyGlmFit,
    y: &AbundanceMatrix,
    n_randomizations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let n = y.n();
    let p = y.p();
    let mut acc = DMatrix::zeros(p, p);
    for _ in 0..n_randomizations {
        let z = ds_residuals(fit, y, rng)?;
        // Column means and standard deviations.
        let mut means = vec![0.0; p];
        for j in 0..p {
            means[j] = z.column(j).sum() / n as f64;
        }
        let mut sds = vec![0.0; p];
        for j in 0..p {
            let mut v = 0.0;
            for i in 0..n {
                let d = z[(i, j)] - means[j];
                v += d * d;
            }
            sds[j] = (v / (n - 1) as f64).sqrt();
        }
        for a in 0..p {
            for b in a..p {
                let r = if sds[a] < 1e-12 || sds[b] < 1e-12 {
                    if a == b {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    let mut c = 0.0;
                    for i in 0..n {
                        c += (z[(i, a)] - means[a]) * (z[(i, b)] - means[b]);
                    }
                    c / ((n - 1) as f64 * sds[a] * sds[b])
                };
                acc[(a, b)] += r;
                acc[(b, a)] = acc[(a, b)];
            }
        }
    }
    // Average; force an exact unit diagonal.
    acc /= n_randomizations as f64;
    for j in 0..p {
        acc[(j, j)] = 1.0;
    }
    Ok(acc)
}

/// Fit the copula correlation model to the normal-score residuals of a pilot
/// fit. Scores from `opts.n_randomizations` independent randomizations are
/// averaged before the factor model is fit by EM.
pub fn fit_copula(
    fit: &ManyGlmFit,
    y: &AbundanceMatrix,
    q: usize,
    opts: &CopulaOptions,
    rng: &mut ChaCha8Rng,
) -> Result<CopulaModel> {
    let n = y.n();
    let p = y.p();
    if q >= p {
        return Err(Error::validation(format!(
            "factor count q = {q} must be smaller than the number of taxa p = {p}"
        )));
    }
    let mut warnings = Vec::new();
    let params = fa_param_count(p, q)?;
    if params > n * p {
        warnings.push(format!(
            "correlation model has {params} parameters but only {} observations ({n} samples x \
             {p} taxa); estimates may be unstable",
            n * p
        ));
    }
    let s = score_correlation(fit, y, opts.n_randomizations, rng)?;
    let fm = fit_factor_model(&s, n, q, &opts.factor)?;
    CopulaModel::from_parts(
        fm.loadings,
        fm.uniquenesses,
        fit.clone(),
        CopulaEstimation {
            loglik: fm.loglik,
            iterations: fm.iterations,
            n_randomizations: opts.n_randomizations,
            warnings,
        },
    )
}

/// Reusable simulator: quantile tables are built once per (covariate pattern,
/// taxon) pair and shared across every dataset drawn from the same
/// coefficients, which is what makes large simulation batches affordable.
pub struct Simulator {
    family: Family,
    n: usize,
    p: usize,
    q: usize,
    loadings: DMatrix<f64>,
    psi_sqrt: Vec<f64>,
    pattern_of_row: Vec<usize>,
    /// tables[g][j]: quantile table for covariate pattern g, taxon j.
    tables: Vec<Vec<CdfTable>>,
    taxon_names: Vec<String>,
    sample_ids: Vec<String>,
    normal: Normal,
}

impl Simulator {
    /// Build a simulator for drawing datasets over the rows of `x_new` with the
    /// given coefficient matrix and (for negative-binomial margins) dispersions.
    pub fn new(
        model: &CopulaModel,
        coeffs: &CoefficientMatrix,
        dispersions: Option<&[f64]>,
        x_new: &ModelMatrix,
    ) -> Result<Simulator> {
        let family = model.margins().family();
        let p = model.n_taxa();
        let k = x_new.n_cols();
        let n = x_new.n_rows();
        if coeffs.values.nrows() != k {
            return Err(Error::validation(format!(
                "coefficient matrix has {} rows but the design has {k} columns",
                coeffs.values.nrows()
            )));
        }
        if coeffs.values.ncols() != p {
            return Err(Error::validation(format!(
                "coefficient matrix has {} taxa but the copula has {p}",
                coeffs.values.ncols()
            )));
        }
        if coeffs.column_names != x_new.column_names() {
            return Err(Error::validation(
                "coefficient rows are not aligned with the design columns".to_string(),
            ));
        }
        if coeffs.taxon_names != model.margins().taxon_names() {
            return Err(Error::validation(
                "coefficient taxa are not aligned with the fitted taxa".to_string(),
            ));
        }
        let phi: Vec<f64> = match (family.has_dispersion(), dispersions) {
            (true, Some(d)) => {
                if d.len() != p {
                    return Err(Error::validation(format!(
                        "{} dispersions for {p} taxa",
                        d.len()
                    )));
                }
                d.to_vec()
            }
            (true, None) => {
                return Err(Error::validation(
                    "negative-binomial simulation requires dispersions".to_string(),
                ))
            }
            (false, _) => vec![1.0; p],
        };

        // Distinct covariate patterns among the rows of x_new.
        let x = x_new.x();
        let mut pattern_of_row = Vec::with_capacity(n);
        let mut pattern_rows: Vec<usize> = Vec::new();
        for i in 0..n {
            let found = pattern_rows.iter().position(|&r| {
                (0..k).all(|c| x[(r, c)] == x[(i, c)])
            });
            match found {
                Some(g) => pattern_of_row.push(g),
                None => {
                    pattern_rows.push(i);
                    pattern_of_row.push(pattern_rows.len() - 1);
                }
            }
        }

        // One quantile table per (pattern, taxon).
        let mut tables = Vec::with_capacity(pattern_rows.len());
        for &r in &pattern_rows {
            let mut row_tables = Vec::with_capacity(p);
            for j in 0..p {
                let mut eta = 0.0;
                for c in 0..k {
                    eta += x[(r, c)] * coeffs.values[(c, j)];
                }
                let mu = family.inverse_link(eta);
                if !mu.is_finite() {
                    return Err(Error::numeric(format!(
                        "simulated mean for design row {}, taxon '{}' is not finite \
                         (linear predictor {eta})",
                        r + 1,
                        coeffs.taxon_names[j]
                    )));
                }
                let table = CdfTable::build(family, mu, phi[j]).map_err(|e| {
                    e.with_context(&format!(
                        "design row {}, taxon '{}'",
                        r + 1,
                        coeffs.taxon_names[j]
                    ))
                })?;
                row_tables.push(table);
            }
            tables.push(row_tables);
        }

        let q = model.n_factors();
        let psi_sqrt = model
            .uniquenesses()
            .iter()
            .map(|&v| v.sqrt())
            .collect::<Vec<f64>>();
        Ok(Simulator {
            family,
            n,
            p,
            q,
            loadings: model.loadings().clone(),
            psi_sqrt,
            pattern_of_row,
            tables,
            taxon_names: model.margins().taxon_names().to_vec(),
            sample_ids: (1..=n).map(|i| format!("sim{i}")).collect(),
            normal: Normal::new(0.0, 1.0).expect("standard normal"),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    /// Draw one dataset. Draw order is fixed (per row: q factor normals, then p
    /// unique normals) so output depends only on the stream state.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> AbundanceMatrix {
        let mut counts = DMatrix::zeros(self.n, self.p);
        let mut f = vec![0.0; self.q];
        for i in 0..self.n {
            for fv in f.iter_mut() {
                *fv = StandardNormal.sample(rng);
            }
            let g = self.pattern_of_row[i];
            for j in 0..self.p {
                let e: f64 = StandardNormal.sample(rng);
                let mut z = e * self.psi_sqrt[j];
                for (fi, fv) in f.iter().enumerate() {
                    z += self.loadings[(j, fi)] * fv;
                }
                let u = self.normal.cdf(z);
                counts[(i, j)] = self.tables[g][j].quantile(u) as f64;
            }
        }
        AbundanceMatrix::new_unchecked(
            counts,
            self.taxon_names.clone(),
            self.sample_ids.clone(),
        )
    }

    /// The (unit-variance) latent density is standard normal; expose the
    /// family for callers assembling diagnostics.
    pub fn family(&self) -> Family {
        self.family
    }
}

/// One-shot convenience wrapper around [`Simulator`].
pub fn simulate(
    model: &CopulaModel,
    coeffs: &CoefficientMatrix,
    dispersions: Option<&[f64]>,
    x_new: &ModelMatrix,
    rng: &mut ChaCha8Rng,
) -> Result<AbundanceMatrix> {
    Ok(Simulator::new(model, coeffs, dispersions, x_new)?.draw(rng))
}
