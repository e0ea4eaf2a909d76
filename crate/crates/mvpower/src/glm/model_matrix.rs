//! Design-to-model-matrix expansion with treatment (reference-level) coding.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::ingest::{Column, DesignFrame};

/// Relative tolerance used to flag a column as linearly dependent on the
/// columns before it.
const RANK_TOL: f64 = 1e-8;

/// How one model term maps onto model-matrix columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TermInfo {
    pub name: String,
    /// True for categorical covariates (dummy-coded), false for numeric.
    pub categorical: bool,
    /// Declared level order for categorical terms; `levels[0]` is the reference
    /// level and has no column. Empty for numeric terms.
    pub levels: Vec<String>,
    /// Indices of this term's columns in the model matrix, in level order
    /// (or the single slope column for numeric terms).
    pub columns: Vec<usize>,
}

/// Fixed-effects model matrix: intercept column first, then one block of
/// columns per requested term.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrix {
    x: DMatrix<f64>,
    column_names: Vec<String>,
    terms: Vec<TermInfo>,
    design: Arc<DesignFrame>,
}

impl ModelMatrix {
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn terms(&self) -> &[TermInfo] {
        &self.terms
    }

    pub fn term(&self, name: &str) -> Option<&TermInfo> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// Column indices of a term, if present.
    pub fn term_columns(&self, name: &str) -> Option<&[usize]> {
        self.term(name).map(|t| t.columns.as_slice())
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name.clone()).collect()
    }

    /// The design frame this matrix was expanded from.
    pub fn design(&self) -> &Arc<DesignFrame> {
        &self.design
    }

    /// Index of the intercept column (always 0).
    pub fn intercept_column(&self) -> usize {
        0
    }

    /// New model matrix with one term's columns removed; used for null-model
    /// fits. The underlying design frame is shared.
    pub fn drop_term(&self, name: &str) -> Result<ModelMatrix> {
        let target = self.term(name).ok_or_else(|| {
            Error::validation(format!(
                "term '{name}' is not in the model; terms present: [{}]",
                self.term_names().join(", ")
            ))
        })?;
        let dropped: Vec<usize> = target.columns.clone();
        let keep: Vec<usize> = (0..self.n_cols())
            .filter(|c| !dropped.contains(c))
            .collect();
        let x = self.x.select_columns(keep.iter());
        let column_names: Vec<String> =
            keep.iter().map(|&c| self.column_names[c].clone()).collect();
        let remap = |old: usize| keep.iter().position(|&k| k == old).unwrap();
        let terms = self
            .terms
            .iter()
            .filter(|t| t.name != name)
            .map(|t| TermInfo {
                name: t.name.clone(),
                categorical: t.categorical,
                levels: t.levels.clone(),
                columns: t.columns.iter().map(|&c| remap(c)).collect(),
            })
            .collect();
        Ok(ModelMatrix {
            x,
            column_names,
            terms,
            design: Arc::clone(&self.design),
        })
    }
}

/// Expand `terms` of a design frame into a model matrix with an intercept.
///
/// Categorical terms are dummy-coded against their first declared level; numeric
/// terms contribute one slope column. The result is checked for full column
/// rank, and linearly dependent columns are reported by name.
pub fn build_model_matrix(design: &Arc<DesignFrame>, terms: &[String]) -> Result<ModelMatrix> {
    if terms.is_empty() {
        // Intercept-only model.
        let n = design.n_rows();
        return Ok(ModelMatrix {
            x: DMatrix::from_element(n, 1, 1.0),
            column_names: vec!["(Intercept)".to_string()],
            terms: Vec::new(),
            design: Arc::clone(design),
        });
    }
    let n = design.n_rows();
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut column_names = vec!["(Intercept)".to_string()];
    let mut term_infos = Vec::new();

    for term in terms {
        if term_infos.iter().any(|t: &TermInfo| &t.name == term) {
            return Err(Error::validation(format!("term '{term}' listed twice")));
        }
        let col = design.column(term).ok_or_else(|| {
            Error::validation(format!(
                "term '{term}' is not a design column; available: [{}]",
                design.names().join(", ")
            ))
        })?;
        match col {
            Column::Categorical { levels, codes } => {
                let mut idx = Vec::new();
                for (l, level) in levels.iter().enumerate().skip(1) {
                    let mut v = vec![0.0; n];
                    for (i, &code) in codes.iter().enumerate() {
                        if code as usize == l {
                            v[i] = 1.0;
                        }
                    }
                    idx.push(columns.len());
                    columns.push(v);
                    column_names.push(format!("{term}{level}"));
                }
                term_infos.push(TermInfo {
                    name: term.clone(),
                    categorical: true,
                    levels: levels.clone(),
                    columns: idx,
                });
            }
            Column::Numeric { values } => {
                term_infos.push(TermInfo {
                    name: term.clone(),
                    categorical: false,
                    levels: Vec::new(),
                    columns: vec![columns.len()],
                });
                columns.push(values.clone());
                column_names.push(term.clone());
            }
        }
    }

    let k = columns.len();
    let mut x = DMatrix::zeros(n, k);
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            x[(i, j)] = v;
        }
    }

    if k > n {
        return Err(Error::validation(format!(
            "model has {k} coefficients but only {n} rows"
        )));
    }
    let dependent = dependent_columns(&x);
    if !dependent.is_empty() {
        let names: Vec<&str> = dependent
            .iter()
            .map(|&c| column_names[c].as_str())
            .collect();
        return Err(Error::validation(format!(
            "model matrix is rank deficient; column(s) [{}] are linear combinations of \
             earlier columns (check for empty factor levels or aliased covariates)",
            names.join(", ")
        )));
    }

    Ok(ModelMatrix {
        x,
        column_names,
        terms: term_infos,
        design: Arc::clone(design),
    })
}

/// Indices of columns that are (numerically) linear combinations of the columns
/// before them, by modified Gram-Schmidt.
fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let n = x.nrows();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let mut v: Vec<f64> = (0..n).map(|i| x[(i, j)]).collect();
        let orig_norm = norm(&v);
        if orig_norm == 0.0 {
            dependent.push(j);
            continue;
        }
        for b in &basis {
            let d = dot(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= d * bi;
            }
        }
        // Second pass stabilizes near-dependent columns.
        for b in &basis {
            let d = dot(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= d * bi;
            }
        }
        let res = norm(&v);
        if res < RANK_TOL * orig_norm {
            dependent.push(j);
        } else {
            for vi in v.iter_mut() {
                *vi /= res;
            }
            basis.push(v);
        }
    }
    dependent
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Column;

    fn three_group_design() -> Arc<DesignFrame> {
        Arc::new(
            DesignFrame::new(
                vec!["group".to_string()],
                vec![Column::Categorical {
                    levels: vec![
                        "control".to_string(),
                        "restored".to_string(),
                        "reference".to_string(),
                    ],
                    codes: vec![0, 0, 0, 1, 1, 1, 2, 2, 2],
                }],
            )
            .unwrap(),
        )
    }

    #[test]
    fn three_level_factor_expands_to_two_dummies() {
        let d = three_group_design();
        let mm = build_model_matrix(&d, &["group".to_string()]).unwrap();
        assert_eq!(mm.n_cols(), 3);
        let names: Vec<&str> = mm.column_names().iter().map(|s| s.as_str()).collect();
        assert_eq!(names, vec!["(Intercept)", "grouprestored", "groupreference"]);
        // Reference level rows: intercept only.
        for i in 0..3 {
            assert_eq!(mm.x()[(i, 1)], 0.0);
            assert_eq!(mm.x()[(i, 2)], 0.0);
        }
        for i in 3..6 {
            assert_eq!(mm.x()[(i, 1)], 1.0);
            assert_eq!(mm.x()[(i, 2)], 0.0);
        }
        for i in 6..9 {
            assert_eq!(mm.x()[(i, 1)], 0.0);
            assert_eq!(mm.x()[(i, 2)], 1.0);
        }
        let t = mm.term("group").unwrap();
        assert!(t.categorical);
        assert_eq!(t.columns, vec![1, 2]);
    }

    #[test]
    fn intercept_only_matrix() {
        let d = three_group_design();
        let mm = build_model_matrix(&d, &[]).unwrap();
        assert_eq!(mm.n_cols(), 1);
        assert!(mm.x().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn numeric_term_is_single_column() {
        let d = Arc::new(
            DesignFrame::new(
                vec!["depth".to_string()],
                vec![Column::Numeric {
                    values: vec![0.5, 1.0, 1.5, 2.0],
                }],
            )
            .unwrap(),
        );
        let mm = build_model_matrix(&d, &["depth".to_string()]).unwrap();
        assert_eq!(mm.n_cols(), 2);
        assert_eq!(mm.x()[(2, 1)], 1.5);
        assert!(!mm.term("depth").unwrap().categorical);
    }

    #[test]
    fn unknown_term_lists_available_columns() {
        let d = three_group_design();
        let err = build_model_matrix(&d, &["treatment".to_string()]).unwrap_err();
        assert!(err.to_string().contains("group"));
    }

    #[test]
    fn aliased_column_is_named() {
        // Numeric copy of the dummy for 'restored' makes the model singular.
        let d = Arc::new(
            DesignFrame::new(
                vec!["group".to_string(), "dup".to_string()],
                vec![
                    Column::Categorical {
                        levels: vec!["a".to_string(), "b".to_string()],
                        codes: vec![0, 0, 1, 1],
                    },
                    Column::Numeric {
                        values: vec![0.0, 0.0, 1.0, 1.0],
                    },
                ],
            )
            .unwrap(),
        );
        let err =
            build_model_matrix(&d, &["group".to_string(), "dup".to_string()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rank deficient") && msg.contains("dup"), "got: {msg}");
    }

    #[test]
    fn empty_level_makes_rank_error() {
        // Declared level with no observations produces an all-zero dummy.
        let d = Arc::new(
            DesignFrame::new(
                vec!["group".to_string()],
                vec![Column::Categorical {
                    levels: vec!["a".to_string(), "b".to_string(), "ghost".to_string()],
                    codes: vec![0, 1, 0, 1],
                }],
            )
            .unwrap(),
        );
        let err = build_model_matrix(&d, &["group".to_string()]).unwrap_err();
        assert!(err.to_string().contains("groupghost"));
    }

    #[test]
    fn drop_term_removes_exactly_its_columns() {
        let d = Arc::new(
            DesignFrame::new(
                vec!["group".to_string(), "depth".to_string()],
                vec![
                    Column::Categorical {
                        levels: vec!["a".to_string(), "b".to_string()],
                        codes: vec![0, 1, 0, 1],
                    },
                    Column::Numeric {
                        values: vec![0.1, 0.2, 0.3, 0.4],
                    },
                ],
            )
            .unwrap(),
        );
        let mm =
            build_model_matrix(&d, &["group".to_string(), "depth".to_string()]).unwrap();
        assert_eq!(mm.n_cols(), 3);
        let null = mm.drop_term("group").unwrap();
        assert_eq!(null.n_cols(), 2);
        let names: Vec<&str> = null.column_names().iter().map(|s| s.as_str()).collect();
        assert_eq!(names, vec!["(Intercept)", "depth"]);
        assert_eq!(null.term_columns("depth").unwrap(), &[1]);
        assert!(null.term("group").is_none());
        assert!(mm.drop_term("nope").is_err());
    }
}
