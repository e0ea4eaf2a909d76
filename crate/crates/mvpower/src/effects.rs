//! Interpretable effect-size injection: build coefficient matrices that encode
//! "these taxa increase by a factor rho per level step, those decrease" on top
//! of a fitted model, plus the matching no-effect (null) matrix.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::glm::manyglm::{fit_manyglm, fit_manyglm_with_dispersions, ManyGlmFit};

/// Which taxa respond to a model term, and how strongly.
///
/// `effect_size` is the multiplicative mean change rho per unit of the term:
/// one level step above baseline for categorical terms (level l gets ratio
/// rho^l), one covariate unit for numeric terms. Increasers get +log(rho),
/// decreasers -log(rho), everything else 0.
#[derive(Debug, Clone)]
pub struct EffectSpec {
    pub term: String,
    pub effect_size: f64,
    pub increasers: Vec<String>,
    pub decreasers: Vec<String>,
}

/// Coefficient matrix aligned with a model matrix (rows) and a taxon list
/// (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    /// k x p coefficients; row order matches `column_names`.
    pub values: DMatrix<f64>,
    pub column_names: Vec<String>,
    pub taxon_names: Vec<String>,
}

impl CoefficientMatrix {
    /// Write as CSV: one row per model-matrix column, one column per taxon.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        write!(out, "coefficient").expect("in-memory write");
        for t in &self.taxon_names {
            write!(out, ",{t}").expect("in-memory write");
        }
        writeln!(out).expect("in-memory write");
        for r in 0..self.values.nrows() {
            write!(out, "{}", self.column_names[r]).expect("in-memory write");
            for c in 0..self.values.ncols() {
                write!(out, ",{}", self.values[(r, c)]).expect("in-memory write");
            }
            writeln!(out).expect("in-memory write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.to_path_buf(), e))
    }
}

fn taxon_indices(fit: &ManyGlmFit, names: &[String], role: &str) -> Result<Vec<usize>> {
    let all = fit.taxon_names();
    let mut idx = Vec::with_capacity(names.len());
    for name in names {
        match all.iter().position(|t| t == name) {
            Some(j) => idx.push(j),
            None => {
                return Err(Error::validation(format!(
                    "{role} taxon '{name}' is not in the fitted data"
                )))
            }
        }
    }
    Ok(idx)
}

/// Coefficient matrix encoding the effect of interest: the fitted coefficients
/// with the chosen term's columns overwritten by the +-(level index)*log(rho)
/// pattern. Intercepts and other terms are untouched.
pub fn effect_alt(fit: &ManyGlmFit, spec: &EffectSpec) -> Result<CoefficientMatrix> {
    if !(spec.effect_size.is_finite() && spec.effect_size > 0.0) {
        return Err(Error::validation(format!(
            "effect size must be a positive number, got {}",
            spec.effect_size
        )));
    }
    if let Some(dup) = spec
        .increasers
        .iter()
        .find(|name| spec.decreasers.contains(name))
    {
        return Err(Error::validation(format!(
            "taxon '{dup}' is listed as both an increaser and a decreaser"
        )));
    }
    let term = fit.model_matrix().term(&spec.term).ok_or_else(|| {
        Error::validation(format!(
            "term '{}' is not in the model; terms present: [{}]",
            spec.term,
            fit.model_matrix().term_names().join(", ")
        ))
    })?;
    let inc = taxon_indices(fit, &spec.increasers, "increaser")?;
    let dec = taxon_indices(fit, &spec.decreasers, "decreaser")?;

    let mut values = fit.coefficients().clone();
    let log_rho = spec.effect_size.ln();
    // Column t of the term block corresponds to level t+1 above baseline
    // (or the single slope column for numeric terms, where t = 0).
    for (t, &col) in term.columns.iter().enumerate() {
        let step = (t + 1) as f64 * log_rho;
        for j in 0..values.ncols() {
            values[(col, j)] = 0.0;
        }
        for &j in &inc {
            values[(col, j)] = step;
        }
        for &j in &dec {
            values[(col, j)] = -step;
        }
    }
    Ok(CoefficientMatrix {
        values,
        column_names: fit.model_matrix().column_names().to_vec(),
        taxon_names: fit.taxon_names().to_vec(),
    })
}

/// Coefficient matrix with no effect of `term`: its columns are zeroed, and for
/// categorical terms the intercept row is replaced by the intercept of a null
/// refit (model without the term) so simulated overall abundance still matches
/// the pilot data rather than the baseline group alone.
pub fn effect_null(fit: &ManyGlmFit, term: &str) -> Result<CoefficientMatrix> {
    effect_null_with(fit, term, None)
}

/// As [`effect_null`], reusing an already-computed null fit (a fit of the same
/// data on the model matrix with `term` dropped) when the caller has one.
pub fn effect_null_with(
    fit: &ManyGlmFit,
    term: &str,
    null_fit: Option<&ManyGlmFit>,
) -> Result<CoefficientMatrix> {
    let info = fit.model_matrix().term(term).ok_or_else(|| {
        Error::validation(format!(
            "term '{term}' is not in the model; terms present: [{}]",
            fit.model_matrix().term_names().join(", ")
        ))
    })?;
    let categorical = info.categorical;
    let term_cols = info.columns.clone();

    let mut values = fit.coefficients().clone();
    for &col in &term_cols {
        for j in 0..values.ncols() {
            values[(col, j)] = 0.0;
        }
    }

    if categorical {
        let owned;
        let null = match null_fit {
            Some(f) => {
                if f.n_taxa() != fit.n_taxa() {
                    return Err(Error::validation(format!(
                        "provided null fit has {} taxa, expected {}",
                        f.n_taxa(),
                        fit.n_taxa()
                    )));
                }
                f
            }
            None => {
                let x_null = Arc::new(fit.model_matrix().drop_term(term)?);
                owned = match fit.dispersions() {
                    Some(phi) => fit_manyglm_with_dispersions(
                        Arc::clone(fit.data()),
                        x_null,
                        fit.family(),
                        phi,
                    )?,
                    None => fit_manyglm(Arc::clone(fit.data()), x_null, fit.family())?,
                };
                &owned
            }
        };
        let int_src = null.model_matrix().intercept_column();
        let int_dst = fit.model_matrix().intercept_column();
        for j in 0..values.ncols() {
            values[(int_dst, j)] = null.coefficients()[(int_src, j)];
        }
    }

    Ok(CoefficientMatrix {
        values,
        column_names: fit.model_matrix().column_names().to_vec(),
        taxon_names: fit.taxon_names().to_vec(),
    })
}
