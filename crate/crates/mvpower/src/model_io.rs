//! Self-contained JSON persistence for fitted copula models.
//!
//! The file embeds the pilot counts, design, and model terms so downstream
//! commands can rebuild the per-taxon fits exactly without re-reading the
//! original CSV inputs. On load the margins are refitted from the embedded
//! pilot data and checked against the stored coefficients, which catches
//! hand-edited files. Field order is fixed, so saving the same model twice
//! produces byte-identical output.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::copula::{CopulaEstimation, CopulaModel};
use crate::error::{Error, Result};
use crate::glm::family::Family;
use crate::glm::manyglm::fit_manyglm;
use crate::glm::model_matrix::build_model_matrix;
use crate::ingest::{AbundanceMatrix, Column, DesignFrame};

pub const MODEL_FORMAT: &str = "mvpower-model";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DesignColumnFile {
    Categorical {
        name: String,
        levels: Vec<String>,
        values: Vec<String>,
    },
    Numeric {
        name: String,
        values: Vec<f64>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct PilotFile {
    sample_ids: Vec<String>,
    /// Row-major counts, one inner vector per sample.
    counts: Vec<Vec<u64>>,
    design: Vec<DesignColumnFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimationFile {
    loglik: f64,
    iterations: usize,
    n_randomizations: usize,
    warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: String,
    family: String,
    /// Test statistic the model is intended for.
    statistic: String,
    seed: u64,
    n_factors: usize,
    terms: Vec<String>,
    taxon_names: Vec<String>,
    coefficient_names: Vec<String>,
    /// Row-major coefficient matrix, one inner vector per coefficient.
    coefficients: Vec<Vec<f64>>,
    dispersions: Option<Vec<f64>>,
    /// Row-major loadings, one inner vector per taxon.
    loadings: Vec<Vec<f64>>,
    uniquenesses: Vec<f64>,
    estimation: EstimationFile,
    pilot: PilotFile,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Serialize a fitted model (plus the seed that produced it) to JSON.
pub fn save_model(path: &Path, model: &CopulaModel, seed: u64) -> Result<()> {
    let margins = model.margins();
    let data = margins.data();
    let design = margins.model_matrix().design();
    let design_cols = design
        .names()
        .iter()
        .zip(design.columns())
        .map(|(name, col)| match col {
            Column::Categorical { levels, codes } => DesignColumnFile::Categorical {
                name: name.clone(),
                levels: levels.clone(),
                values: codes.iter().map(|&c| levels[c as usize].clone()).collect(),
            },
            Column::Numeric { values } => DesignColumnFile::Numeric {
                name: name.clone(),
                values: values.clone(),
            },
        })
        .collect();
    let counts = (0..data.n())
        .map(|i| (0..data.p()).map(|j| data.count(i, j)).collect())
        .collect();
    let est = model.estimation();
    let file = ModelFile {
        format: MODEL_FORMAT.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        family: margins.family().label().to_string(),
        statistic: "sum_lr".to_string(),
        seed,
        n_factors: model.n_factors(),
        terms: margins.model_matrix().term_names(),
        taxon_names: margins.taxon_names().to_vec(),
        coefficient_names: margins.model_matrix().column_names().to_vec(),
        coefficients: matrix_rows(margins.coefficients()),
        dispersions: margins.dispersions().map(<[f64]>::to_vec),
        loadings: matrix_rows(model.loadings()),
        uniquenesses: model.uniquenesses().iter().copied().collect(),
        estimation: EstimationFile {
            loglik: est.loglik,
            iterations: est.iterations,
            n_randomizations: est.n_randomizations,
            warnings: est.warnings.clone(),
        },
        pilot: PilotFile {
            sample_ids: data.sample_ids().to_vec(),
            counts,
            design: design_cols,
        },
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::numeric(format!("could not serialize model: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load a model file, refit the margins from the embedded pilot data, and
/// verify the refit reproduces the stored coefficients.
pub fn load_model(path: &Path) -> Result<(CopulaModel, u64)> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Error::parse(&display, format!("not a valid model file: {e}")))?;
    if file.format != MODEL_FORMAT {
        return Err(Error::parse(
            &display,
            format!("unexpected format tag '{}'", file.format),
        ));
    }
    let family = Family::parse(&file.family)?;

    // Rebuild the pilot dataset.
    let n = file.pilot.sample_ids.len();
    let p = file.taxon_names.len();
    let mut counts = DMatrix::zeros(n, p);
    if file.pilot.counts.len() != n {
        return Err(Error::parse(
            &display,
            format!(
                "pilot counts have {} rows for {} sample ids",
                file.pilot.counts.len(),
                n
            ),
        ));
    }
    for (i, row) in file.pilot.counts.iter().enumerate() {
        if row.len() != p {
            return Err(Error::parse(
                &display,
                format!("pilot counts row {} has {} cells for {} taxa", i + 1, row.len(), p),
            ));
        }
        for (j, &v) in row.iter().enumerate() {
            counts[(i, j)] = v as f64;
        }
    }
    let data = Arc::new(AbundanceMatrix::new(
        counts,
        file.taxon_names.clone(),
        file.pilot.sample_ids.clone(),
    )?);

    let mut names = Vec::new();
    let mut columns = Vec::new();
    for col in &file.pilot.design {
        match col {
            DesignColumnFile::Categorical {
                name,
                levels,
                values,
            } => {
                let codes = values
                    .iter()
                    .map(|v| {
                        levels
                            .iter()
                            .position(|l| l == v)
                            .map(|c| c as u32)
                            .ok_or_else(|| {
                                Error::parse(
                                    &display,
                                    format!(
                                        "design column '{name}': value '{v}' is not among its levels"
                                    ),
                                )
                            })
                    })
                    .collect::<Result<Vec<u32>>>()?;
                names.push(name.clone());
                columns.push(Column::Categorical {
                    levels: levels.clone(),
                    codes,
                });
            }
            DesignColumnFile::Numeric { name, values } => {
                names.push(name.clone());
                columns.push(Column::Numeric {
                    values: values.clone(),
                });
            }
        }
    }
    let design = Arc::new(DesignFrame::new(names, columns)?);
    let x = Arc::new(build_model_matrix(&design, &file.terms)?);
    if x.column_names() != file.coefficient_names.as_slice() {
        return Err(Error::parse(
            &display,
            "stored coefficient names do not match the embedded design and terms",
        ));
    }

    // Refit the margins; the stored coefficients double as an integrity check.
    let fit = fit_manyglm(data, x, family)?;
    let b = fit.coefficients();
    if file.coefficients.len() != b.nrows() {
        return Err(Error::parse(
            &display,
            format!(
                "stored coefficient matrix has {} rows; refit produced {}",
                file.coefficients.len(),
                b.nrows()
            ),
        ));
    }
    for (i, row) in file.coefficients.iter().enumerate() {
        if row.len() != b.ncols() {
            return Err(Error::parse(
                &display,
                format!("stored coefficient row {} has {} entries", i + 1, row.len()),
            ));
        }
        for (j, &v) in row.iter().enumerate() {
            if (v - b[(i, j)]).abs() > 1e-6 * (1.0 + v.abs()) {
                return Err(Error::validation(format!(
                    "stored coefficient for '{}' on taxon '{}' ({v}) disagrees with a refit \
                     of the embedded pilot data ({}); the model file may have been edited",
                    file.coefficient_names[i],
                    file.taxon_names[j],
                    b[(i, j)]
                )));
            }
        }
    }
    if let (Some(stored), Some(refit)) = (&file.dispersions, fit.dispersions()) {
        for (j, (&s, &r)) in stored.iter().zip(refit).enumerate() {
            if (s - r).abs() > 1e-6 * (1.0 + s.abs()) {
                return Err(Error::validation(format!(
                    "stored dispersion for taxon '{}' ({s}) disagrees with a refit ({r})",
                    file.taxon_names[j]
                )));
            }
        }
    }

    let q = file.n_factors;
    let loadings = if q == 0 {
        DMatrix::zeros(p, 0)
    } else {
        let mut l = DMatrix::zeros(p, q);
        if file.loadings.len() != p {
            return Err(Error::parse(
                &display,
                format!("loadings have {} rows for {} taxa", file.loadings.len(), p),
            ));
        }
        for (i, row) in file.loadings.iter().enumerate() {
            if row.len() != q {
                return Err(Error::parse(
                    &display,
                    format!("loadings row {} has {} entries for {} factors", i + 1, row.len(), q),
                ));
            }
            for (j, &v) in row.iter().enumerate() {
                l[(i, j)] = v;
            }
        }
        l
    };
    let uniquenesses = DVector::from_iterator(
        file.uniquenesses.len(),
        file.uniquenesses.iter().copied(),
    );
    let estimation = CopulaEstimation {
        loglik: file.estimation.loglik,
        iterations: file.estimation.iterations,
        n_randomizations: file.estimation.n_randomizations,
        warnings: file.estimation.warnings.clone(),
    };
    let model = CopulaModel::from_parts(loadings, uniquenesses, fit, estimation)
        .map_err(|e| e.with_context(&display))?;
    Ok((model, file.seed))
}
