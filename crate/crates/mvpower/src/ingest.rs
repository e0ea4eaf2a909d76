//! Input data structures and CSV/config ingestion.
//!
//! Counts live in an [`AbundanceMatrix`] (samples x taxa, nonnegative integers);
//! covariates live in a [`DesignFrame`] whose categorical columns carry an
//! explicit level order, with the first level acting as the reference level for
//! model matrices.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::family::Family;

/// Sample-by-taxon count matrix.
///
/// Invariants (checked on construction): at least 2 rows and 1 column, every
/// entry a finite nonnegative integer, and unique taxon names.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceMatrix {
    counts: DMatrix<f64>,
    taxon_names: Vec<String>,
    sample_ids: Vec<String>,
}

impl AbundanceMatrix {
    pub fn new(
        counts: DMatrix<f64>,
        taxon_names: Vec<String>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        if counts.nrows() < 2 {
            return Err(Error::validation(format!(
                "need at least 2 samples, got {}",
                counts.nrows()
            )));
        }
        if counts.ncols() < 1 {
            return Err(Error::validation("need at least 1 taxon column".to_string()));
        }
        if taxon_names.len() != counts.ncols() {
            return Err(Error::validation(format!(
                "{} taxon names for {} columns",
                taxon_names.len(),
                counts.ncols()
            )));
        }
        if sample_ids.len() != counts.nrows() {
            return Err(Error::validation(format!(
                "{} sample ids for {} rows",
                sample_ids.len(),
                counts.nrows()
            )));
        }
        let mut seen = HashSet::new();
        for name in &taxon_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::validation(format!("duplicate taxon name '{name}'")));
            }
        }
        for j in 0..counts.ncols() {
            for i in 0..counts.nrows() {
                let v = counts[(i, j)];
                if !v.is_finite() || v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::validation(format!(
                        "count for sample '{}', taxon '{}' is {v}; counts must be \
                         nonnegative integers",
                        sample_ids[i], taxon_names[j]
                    )));
                }
            }
        }
        Ok(AbundanceMatrix {
            counts,
            taxon_names,
            sample_ids,
        })
    }

    /// Constructor for matrices produced internally (simulator output), where the
    /// entries are integers by construction and ids come from a trusted template.
    pub(crate) fn new_unchecked(
        counts: DMatrix<f64>,
        taxon_names: Vec<String>,
        sample_ids: Vec<String>,
    ) -> Self {
        debug_assert_eq!(taxon_names.len(), counts.ncols());
        debug_assert_eq!(sample_ids.len(), counts.nrows());
        AbundanceMatrix {
            counts,
            taxon_names,
            sample_ids,
        }
    }

    /// Number of samples (rows).
    pub fn n(&self) -> usize {
        self.counts.nrows()
    }

    /// Number of taxa (columns).
    pub fn p(&self) -> usize {
        self.counts.ncols()
    }

    pub fn counts(&self) -> &DMatrix<f64> {
        &self.counts
    }

    pub fn count(&self, sample: usize, taxon: usize) -> u64 {
        self.counts[(sample, taxon)] as u64
    }

    pub fn taxon_names(&self) -> &[String] {
        &self.taxon_names
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn taxon_index(&self, name: &str) -> Option<usize> {
        self.taxon_names.iter().position(|t| t == name)
    }

    /// Column slice for one taxon.
    pub fn taxon_column(&self, taxon: usize) -> Vec<f64> {
        self.counts.column(taxon).iter().copied().collect()
    }
}

/// One covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Column {
    /// Categorical covariate. `levels[0]` is the reference level; `codes[i]`
    /// indexes into `levels` for row i.
    Categorical { levels: Vec<String>, codes: Vec<u32> },
    /// Numeric covariate.
    Numeric { values: Vec<f64> },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Categorical { codes, .. } => codes.len(),
            Column::Numeric { values } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Covariate table aligned row-for-row with an [`AbundanceMatrix`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignFrame {
    names: Vec<String>,
    columns: Vec<Column>,
    n_rows: usize,
}

impl DesignFrame {
    pub fn new(names: Vec<String>, columns: Vec<Column>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::validation(format!(
                "{} column names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        if columns.is_empty() {
            return Err(Error::validation("design has no covariate columns".to_string()));
        }
        let n_rows = columns[0].len();
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != n_rows {
                return Err(Error::validation(format!(
                    "column '{name}' has {} rows; expected {n_rows}",
                    col.len()
                )));
            }
            if let Column::Categorical { levels, codes } = col {
                if levels.is_empty() {
                    return Err(Error::validation(format!(
                        "categorical column '{name}' has no levels"
                    )));
                }
                let mut seen = HashSet::new();
                for l in levels {
                    if !seen.insert(l.as_str()) {
                        return Err(Error::validation(format!(
                            "categorical column '{name}' repeats level '{l}'"
                        )));
                    }
                }
                if let Some(bad) = codes.iter().find(|&&c| c as usize >= levels.len()) {
                    return Err(Error::validation(format!(
                        "categorical column '{name}' has code {bad} outside its {} levels",
                        levels.len()
                    )));
                }
            }
            if let Column::Numeric { values } = col {
                if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                    return Err(Error::validation(format!(
                        "numeric column '{name}' has a non-finite value in row {}",
                        i + 1
                    )));
                }
            }
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::validation(format!("duplicate covariate name '{name}'")));
            }
        }
        Ok(DesignFrame {
            names,
            columns,
            n_rows,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
    }

    /// Opaque pattern key for one row: equal keys iff every covariate matches.
    pub(crate) fn row_key(&self, row: usize) -> Vec<u64> {
        self.columns
            .iter()
            .map(|c| match c {
                Column::Categorical { codes, .. } => codes[row] as u64,
                Column::Numeric { values } => values[row].to_bits(),
            })
            .collect()
    }

    /// New frame consisting of the given rows (with repetition) of this one.
    /// Level declarations are preserved verbatim.
    pub(crate) fn select_rows(&self, rows: &[usize]) -> DesignFrame {
        let columns = self
            .columns
            .iter()
            .map(|c| match c {
                Column::Categorical { levels, codes } => Column::Categorical {
                    levels: levels.clone(),
                    codes: rows.iter().map(|&r| codes[r]).collect(),
                },
                Column::Numeric { values } => Column::Numeric {
                    values: rows.iter().map(|&r| values[r]).collect(),
                },
            })
            .collect();
        DesignFrame {
            names: self.names.clone(),
            columns,
            n_rows: rows.len(),
        }
    }
}

/// Declared column types for design ingestion.
///
/// Categorical declarations fix the level order (first level = reference level).
/// Undeclared columns are inferred: numeric if every cell parses as a number,
/// otherwise categorical with levels in order of first appearance.
#[derive(Debug, Clone, Default)]
pub struct DesignSchema {
    declared: BTreeMap<String, ColumnKind>,
}

#[derive(Debug, Clone)]
pub enum ColumnKind {
    Categorical { levels: Vec<String> },
    Numeric,
}

impl DesignSchema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare_categorical(&mut self, name: &str, levels: Vec<String>) -> Result<()> {
        if levels.is_empty() {
            return Err(Error::validation(format!(
                "level declaration for '{name}' lists no levels"
            )));
        }
        let mut seen = HashSet::new();
        for l in &levels {
            if !seen.insert(l.as_str()) {
                return Err(Error::validation(format!(
                    "level declaration for '{name}' repeats level '{l}'"
                )));
            }
        }
        self.declared
            .insert(name.to_string(), ColumnKind::Categorical { levels });
        Ok(())
    }

    pub fn declare_numeric(&mut self, name: &str) {
        self.declared.insert(name.to_string(), ColumnKind::Numeric);
    }

    /// Parse a `NAME=level1,level2,...` declaration as given on the command line.
    pub fn declare_from_spec(&mut self, spec: &str) -> Result<()> {
        let (name, levels) = spec.split_once('=').ok_or_else(|| {
            Error::validation(format!(
                "level declaration '{spec}' must look like NAME=level1,level2,..."
            ))
        })?;
        let levels: Vec<String> = levels
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        self.declare_categorical(name.trim(), levels)
    }

    fn kind_of(&self, name: &str) -> Option<&ColumnKind> {
        self.declared.get(name)
    }
}

/// Read a counts CSV: header row `sample_id,taxon1,taxon2,...`, one row per
/// sample, integer cells.
pub fn read_counts(path: &Path) -> Result<AbundanceMatrix> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| map_csv_open(path, e))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::parse(&display, format!("header row: {e}")))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::parse(
            &display,
            "header must list a sample-id column and at least one taxon",
        ));
    }
    let taxon_names: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();

    let mut sample_ids = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row_no = idx + 2; // 1-based, counting the header
        let record = record.map_err(|e| {
            Error::parse(&display, format!("row {row_no}: {e}"))
        })?;
        if record.len() != headers.len() {
            return Err(Error::parse(
                &display,
                format!(
                    "row {row_no} has {} fields; expected {}",
                    record.len(),
                    headers.len()
                ),
            ));
        }
        sample_ids.push(record[0].to_string());
        for (j, cell) in record.iter().skip(1).enumerate() {
            let value: u64 = cell.parse().map_err(|_| {
                Error::parse(
                    &display,
                    format!(
                        "row {row_no}, column '{}': '{cell}' is not a nonnegative integer",
                        taxon_names[j]
                    ),
                )
            })?;
            data.push(value as f64);
        }
    }
    if sample_ids.is_empty() {
        return Err(Error::parse(&display, "no data rows"));
    }
    let n = sample_ids.len();
    let p = taxon_names.len();
    let counts = DMatrix::from_row_slice(n, p, &data);
    AbundanceMatrix::new(counts, taxon_names, sample_ids)
}

/// Write a counts CSV in the format accepted by [`read_counts`].
pub fn write_counts(matrix: &AbundanceMatrix, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| map_csv_open(path, e))?;
    let mut header = vec!["sample_id".to_string()];
    header.extend(matrix.taxon_names().iter().cloned());
    writer
        .write_record(&header)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    for i in 0..matrix.n() {
        let mut row = vec![matrix.sample_ids()[i].clone()];
        for j in 0..matrix.p() {
            row.push(matrix.count(i, j).to_string());
        }
        writer
            .write_record(&row)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a design CSV: header row of covariate names, one row per sample,
/// aligned with the counts file. `expected_rows`, when given, is enforced.
pub fn read_design(
    path: &Path,
    schema: &DesignSchema,
    expected_rows: Option<usize>,
) -> Result<DesignFrame> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| map_csv_open(path, e))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::parse(&display, format!("header row: {e}")))?
        .clone();
    if headers.is_empty() {
        return Err(Error::parse(&display, "design file has no columns"));
    }
    let names: Vec<String> = headers.iter().map(|s| s.to_string()).collect();

    let mut cells: Vec<Vec<String>> = vec![Vec::new(); names.len()];
    for (idx, record) in reader.records().enumerate() {
        let row_no = idx + 2;
        let record =
            record.map_err(|e| Error::parse(&display, format!("row {row_no}: {e}")))?;
        if record.len() != names.len() {
            return Err(Error::parse(
                &display,
                format!(
                    "row {row_no} has {} fields; expected {}",
                    record.len(),
                    names.len()
                ),
            ));
        }
        for (j, cell) in record.iter().enumerate() {
            cells[j].push(cell.to_string());
        }
    }
    let n_rows = cells[0].len();
    if n_rows == 0 {
        return Err(Error::parse(&display, "no data rows"));
    }
    if let Some(expected) = expected_rows {
        if n_rows != expected {
            return Err(Error::validation(format!(
                "design file {display} has {n_rows} rows but the counts file has {expected}"
            )));
        }
    }

    let mut columns = Vec::with_capacity(names.len());
    for (name, values) in names.iter().zip(cells.into_iter()) {
        let column = match schema.kind_of(name) {
            Some(ColumnKind::Numeric) => parse_numeric(&display, name, &values, true)?,
            Some(ColumnKind::Categorical { levels }) => {
                let mut codes = Vec::with_capacity(values.len());
                for (i, v) in values.iter().enumerate() {
                    let code = levels.iter().position(|l| l == v).ok_or_else(|| {
                        Error::validation(format!(
                            "column '{name}', row {}: level '{v}' is not among the declared \
                             levels [{}]",
                            i + 2,
                            levels.join(", ")
                        ))
                    })?;
                    codes.push(code as u32);
                }
                Column::Categorical {
                    levels: levels.clone(),
                    codes,
                }
            }
            None => {
                // Infer: numeric if everything parses, else categorical with
                // levels in first-appearance order.
                match parse_numeric(&display, name, &values, false) {
                    Ok(col) => col,
                    Err(_) => {
                        let mut levels: Vec<String> = Vec::new();
                        let mut codes = Vec::with_capacity(values.len());
                        for v in &values {
                            let code = match levels.iter().position(|l| l == v) {
                                Some(i) => i,
                                None => {
                                    levels.push(v.clone());
                                    levels.len() - 1
                                }
                            };
                            codes.push(code as u32);
                        }
                        Column::Categorical { levels, codes }
                    }
                }
            }
        };
        columns.push(column);
    }
    DesignFrame::new(names, columns)
}

fn parse_numeric(path: &str, name: &str, values: &[String], declared: bool) -> Result<Column> {
    let mut out = Vec::with_capacity(values.len());
    for (i, v) in values.iter().enumerate() {
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => out.push(x),
            _ if declared => {
                return Err(Error::parse(
                    path,
                    format!(
                        "column '{name}', row {}: '{v}' is not a finite number",
                        i + 2
                    ),
                ));
            }
            _ => {
                return Err(Error::validation(format!(
                    "column '{name}' is not numeric"
                )));
            }
        }
    }
    Ok(Column::Numeric { values: out })
}

fn map_csv_open(path: &Path, e: csv::Error) -> Error {
    if let csv::ErrorKind::Io(io) = e.into_kind() {
        Error::io(path, io)
    } else {
        Error::parse(path.display().to_string(), "could not open CSV")
    }
}

/// Worker-thread setting for parallel sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workers {
    /// Use the process-default thread pool.
    Auto,
    /// Use exactly this many threads.
    Fixed(usize),
}

impl Workers {
    pub fn parse(s: &str) -> Result<Workers> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Workers::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Workers::Fixed(n)),
            _ => Err(Error::validation(format!(
                "workers must be 'auto' or a positive integer, got '{s}'"
            ))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Workers::Auto => "auto".to_string(),
            Workers::Fixed(n) => n.to_string(),
        }
    }
}

/// Run-level settings shared by the subcommands. Values come from defaults, then
/// an optional `key=value` config file, then command-line flags, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub family: Family,
    pub n_factors: usize,
    pub alpha: f64,
    pub n_power: usize,
    pub n_resamp: usize,
    pub seed: u64,
    pub workers: Workers,
    pub residual_draws: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            family: Family::NegativeBinomial,
            n_factors: 1,
            alpha: 0.05,
            n_power: 1000,
            n_resamp: 1000,
            seed: 0,
            workers: Workers::Auto,
            residual_draws: 5,
        }
    }
}

impl RunConfig {
    /// Apply `key=value` lines from a config file on top of `self`.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(
                    &display,
                    format!("line {}: expected key=value, got '{line}'", idx + 1),
                )
            })?;
            self.apply_pair(key.trim(), value.trim())
                .map_err(|e| e.with_context(&format!("{display} line {}", idx + 1)))?;
        }
        Ok(())
    }

    /// Apply one `key=value` setting.
    pub fn apply_pair(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "family" => self.family = Family::parse(value)?,
            "n_factors" | "q" => {
                self.n_factors = value.parse().map_err(|_| {
                    Error::validation(format!("n_factors must be an integer, got '{value}'"))
                })?
            }
            "alpha" => {
                self.alpha = value.parse().map_err(|_| {
                    Error::validation(format!("alpha must be a number, got '{value}'"))
                })?
            }
            "n_power" => {
                self.n_power = value.parse().map_err(|_| {
                    Error::validation(format!("n_power must be an integer, got '{value}'"))
                })?
            }
            "n_resamp" => {
                self.n_resamp = value.parse().map_err(|_| {
                    Error::validation(format!("n_resamp must be an integer, got '{value}'"))
                })?
            }
            "seed" => {
                self.seed = value.parse().map_err(|_| {
                    Error::validation(format!("seed must be an unsigned integer, got '{value}'"))
                })?
            }
            "workers" => self.workers = Workers::parse(value)?,
            "residual_draws" => {
                self.residual_draws = value.parse().map_err(|_| {
                    Error::validation(format!(
                        "residual_draws must be an integer, got '{value}'"
                    ))
                })?
            }
            other => {
                return Err(Error::validation(format!(
                    "unknown config key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Check ranges that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::validation(format!(
                "alpha must lie strictly between 0 and 1, got {}",
                self.alpha
            )));
        }
        if self.n_power < 1 {
            return Err(Error::validation("n_power must be at least 1".to_string()));
        }
        if self.n_resamp < 1 {
            return Err(Error::validation("n_resamp must be at least 1".to_string()));
        }
        if self.residual_draws < 1 {
            return Err(Error::validation(
                "residual_draws must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Shorthand used across the pipeline: counts plus aligned design.
#[derive(Debug, Clone)]
pub struct PilotData {
    pub counts: Arc<AbundanceMatrix>,
    pub design: Arc<DesignFrame>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fmt::Write as _;
    use std::io::Write;
    use tempfile::NamedTempFile;

    fn write_temp(content: &str) -> NamedTempFile {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn reads_small_counts_file() {
        let f = write_temp("sample_id,taxA,taxB\ns1,0,3\ns2,12,1\ns3,4,0\n");
        let m = read_counts(f.path()).unwrap();
        assert_eq!(m.n(), 3);
        assert_eq!(m.p(), 2);
        assert_eq!(m.count(1, 0), 12);
        assert_eq!(m.taxon_names(), &["taxA".to_string(), "taxB".to_string()]);
        assert_eq!(m.sample_ids()[2], "s3");
    }

    #[test]
    fn negative_count_names_the_cell() {
        let f = write_temp("sample_id,taxA,taxB\ns1,0,3\ns2,-1,1\n");
        let err = read_counts(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3"), "missing row in: {msg}");
        assert!(msg.contains("taxA"), "missing column in: {msg}");
    }

    #[test]
    fn non_integer_count_names_the_cell() {
        let f = write_temp("sample_id,taxA\ns1,0\ns2,2.5\n");
        let err = read_counts(f.path()).unwrap_err();
        assert!(err.to_string().contains("row 3"));
    }

    #[test]
    fn ragged_row_is_rejected() {
        let f = write_temp("sample_id,taxA,taxB\ns1,0,3\ns2,1\n");
        assert!(read_counts(f.path()).is_err());
    }

    #[test]
    fn duplicate_taxon_rejected() {
        let f = write_temp("sample_id,taxA,taxA\ns1,0,3\ns2,1,2\n");
        let err = read_counts(f.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate taxon"));
    }

    #[test]
    fn single_row_rejected() {
        let f = write_temp("sample_id,taxA\ns1,0\n");
        assert!(read_counts(f.path()).is_err());
    }

    #[test]
    fn counts_round_trip() {
        let f = write_temp("sample_id,taxA,taxB,taxC\ns1,0,3,7\ns2,12,1,0\ns3,4,0,2\n");
        let m = read_counts(f.path()).unwrap();
        let out = NamedTempFile::new().unwrap();
        write_counts(&m, out.path()).unwrap();
        let m2 = read_counts(out.path()).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn design_with_declared_levels_uses_declared_order() {
        let f = write_temp("group\nrestored\ncontrol\nreference\ncontrol\n");
        let mut schema = DesignSchema::new();
        schema
            .declare_from_spec("group=control,restored,reference")
            .unwrap();
        let d = read_design(f.path(), &schema, Some(4)).unwrap();
        match d.column("group").unwrap() {
            Column::Categorical { levels, codes } => {
                assert_eq!(levels, &["control", "restored", "reference"]);
                assert_eq!(codes, &[1, 0, 2, 0]);
            }
            _ => panic!("expected categorical"),
        }
    }

    #[test]
    fn design_inference_uses_first_appearance_order() {
        let f = write_temp("group,depth\nzebra,1.5\napple,2.0\nzebra,2.5\n");
        let d = read_design(f.path(), &DesignSchema::new(), Some(3)).unwrap();
        match d.column("group").unwrap() {
            Column::Categorical { levels, codes } => {
                // Not alphabetical: order of first appearance.
                assert_eq!(levels, &["zebra", "apple"]);
                assert_eq!(codes, &[0, 1, 0]);
            }
            _ => panic!("expected categorical"),
        }
        match d.column("depth").unwrap() {
            Column::Numeric { values } => assert_eq!(values, &[1.5, 2.0, 2.5]),
            _ => panic!("expected numeric"),
        }
    }

    #[test]
    fn unknown_level_is_rejected_with_location() {
        let f = write_temp("group\ncontrol\nweird\n");
        let mut schema = DesignSchema::new();
        schema.declare_from_spec("group=control,impact").unwrap();
        let err = read_design(f.path(), &schema, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("weird") && msg.contains("row 3"), "got: {msg}");
    }

    #[test]
    fn row_count_mismatch_is_rejected() {
        let f = write_temp("group\na\nb\n");
        let err = read_design(f.path(), &DesignSchema::new(), Some(5)).unwrap_err();
        assert!(err.to_string().contains("2 rows"));
    }

    #[test]
    fn wide_matrix_reads() {
        let p = 34;
        let header: Vec<String> = std::iter::once("sample_id".to_string())
            .chain((0..p).map(|j| format!("t{j}")))
            .collect();
        let mut text = header.join(",");
        text.push('\n');
        for i in 0..6 {
            let mut row = format!("s{i}");
            for j in 0..p {
                let _ = write!(row, ",{}", (i * 7 + j * 3) % 11);
            }
            text.push_str(&row);
            text.push('\n');
        }
        let f = write_temp(&text);
        let m = read_counts(f.path()).unwrap();
        assert_eq!((m.n(), m.p()), (6, 34));
        assert_eq!(m.count(2, 33), (2 * 7 + 33 * 3) % 11);
    }

    #[test]
    fn config_file_and_overrides() {
        let f = write_temp("# comment\nfamily = poisson\nalpha=0.1\nn_power = 200\nworkers=4\n");
        let mut cfg = RunConfig::default();
        cfg.apply_file(f.path()).unwrap();
        assert_eq!(cfg.family, Family::Poisson);
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.n_power, 200);
        assert_eq!(cfg.workers, Workers::Fixed(4));
        // Flag-style override wins over the file value.
        cfg.apply_pair("alpha", "0.05").unwrap();
        assert_eq!(cfg.alpha, 0.05);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_pair("n_sims", "10").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn config_validation_bounds() {
        let mut cfg = RunConfig::default();
        cfg.alpha = 1.0;
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.05;
        cfg.n_resamp = 0;
        assert!(cfg.validate().is_err());
    }
}
