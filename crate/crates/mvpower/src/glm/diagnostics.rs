//! Plot-ready diagnostic tables: per-taxon mean/variance pairs (to inspect
//! overdispersion) and linear predictor vs normal-score residual (to inspect
//! model misspecification).

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::glm::manyglm::ManyGlmFit;
use crate::glm::residuals::ds_residuals;
use crate::ingest::AbundanceMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanVarianceRow {
    pub taxon: String,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualFitRow {
    pub sample: String,
    pub taxon: String,
    /// Fitted linear predictor for the cell.
    pub eta: f64,
    /// Randomized normal-score residual for the cell.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct DiagnosticsTables {
    pub mean_variance: Vec<MeanVarianceRow>,
    pub residual_fit: Vec<ResidualFitRow>,
}

/// Build both diagnostic tables. The residual panel randomizes within CDF
/// jumps, hence the seeded stream argument.
pub fn diagnostics(
    fit: &ManyGlmFit,
    y: &AbundanceMatrix,
    rng: &mut ChaCha8Rng,
) -> Result<DiagnosticsTables> {
    let n = y.n();
    let p = y.p();
    let mut mean_variance = Vec::with_capacity(p);
    for j in 0..p {
        let mut mean = 0.0;
        for i in 0..n {
            mean += y.counts()[(i, j)];
        }
        mean /= n as f64;
        let mut variance = 0.0;
        for i in 0..n {
            let d = y.counts()[(i, j)] - mean;
            variance += d * d;
        }
        variance /= (n - 1) as f64;
        mean_variance.push(MeanVarianceRow {
            taxon: y.taxon_names()[j].clone(),
            mean,
            variance,
        });
    }

    let eta = fit.linear_predictors();
    let z = ds_residuals(fit, y, rng)?;
    let mut residual_fit = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            residual_fit.push(ResidualFitRow {
                sample: y.sample_ids()[i].clone(),
                taxon: y.taxon_names()[j].clone(),
                eta: eta[(i, j)],
                residual: z[(i, j)],
            });
        }
    }
    Ok(DiagnosticsTables {
        mean_variance,
        residual_fit,
    })
}

/// Write the mean/variance table as CSV (columns: taxon, mean, variance).
pub fn write_mean_variance_csv(rows: &[MeanVarianceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    w.write_record(["taxon", "mean", "variance"])
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    for r in rows {
        w.write_record([r.taxon.as_str(), &r.mean.to_string(), &r.variance.to_string()])
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write the residual panel as CSV (columns: sample, taxon, eta, residual).
pub fn write_residual_fit_csv(rows: &[ResidualFitRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    w.write_record(["sample", "taxon", "eta", "residual"])
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    for r in rows {
        w.write_record([
            r.sample.as_str(),
            r.taxon.as_str(),
            &r.eta.to_string(),
            &r.residual.to_string(),
        ])
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::family::Family;
    use crate::glm::manyglm::fit_manyglm;
    use crate::glm::model_matrix::build_model_matrix;
    use crate::ingest::{Column, DesignFrame};
    use crate::rng::{stream, Phase};
    use nalgebra::DMatrix;
    use rand::Rng;
    use std::sync::Arc;

    fn fixture(counts: Vec<f64>, n: usize, p: usize) -> (ManyGlmFit, Arc<AbundanceMatrix>) {
        let y = Arc::new(
            AbundanceMatrix::new(
                DMatrix::from_row_slice(n, p, &counts),
                (0..p).map(|j| format!("t{j}")).collect(),
                (0..n).map(|i| format!("s{i}")).collect(),
            )
            .unwrap(),
        );
        let design = Arc::new(
            DesignFrame::new(
                vec!["c".to_string()],
                vec![Column::Numeric {
                    values: vec![0.0; n],
                }],
            )
            .unwrap(),
        );
        let x = Arc::new(build_model_matrix(&design, &[]).unwrap());
        let fit = fit_manyglm(Arc::clone(&y), x, Family::Poisson).unwrap();
        (fit, y)
    }

    #[test]
    fn poisson_data_scatter_near_identity_line() {
        // Regression (through the origin) of sample variance on sample mean
        // should have slope near 1 for Poisson data.
        let n = 200;
        let p = 12;
        let mut rng = stream(11, Phase::Diagnostics, 0, 0);
        let mut counts = vec![0.0; n * p];
        for j in 0..p {
            let mu = 1.0 + j as f64;
            let d = rand_distr::Poisson::new(mu).unwrap();
            for i in 0..n {
                counts[i * p + j] = rand_distr::Distribution::sample(&d, &mut rng);
            }
        }
        let (fit, y) = fixture(counts, n, p);
        let mut rng2 = stream(11, Phase::Diagnostics, 1, 0);
        let tables = diagnostics(&fit, &y, &mut rng2).unwrap();
        let sxy: f64 = tables
            .mean_variance
            .iter()
            .map(|r| r.mean * r.variance)
            .sum();
        let sxx: f64 = tables.mean_variance.iter().map(|r| r.mean * r.mean).sum();
        let slope = sxy / sxx;
        assert!(
            (slope - 1.0).abs() < 0.2,
            "variance-on-mean slope {slope} should be near 1 for Poisson data"
        );
    }

    #[test]
    fn overdispersed_data_sit_above_identity_line() {
        // Negative binomial with phi = 1: Var = mu + mu^2, so variance/mean
        // grows with the mean.
        let n = 300;
        let p = 8;
        let mut rng = stream(13, Phase::Diagnostics, 0, 0);
        let mut counts = vec![0.0; n * p];
        for j in 0..p {
            let mu = 2.0 + 2.0 * j as f64;
            // NB draw = Poisson with gamma-distributed rate (shape phi, scale mu/phi).
            let gamma = rand_distr::Gamma::new(1.0, mu).unwrap();
            for i in 0..n {
                let lambda: f64 = rand_distr::Distribution::sample(&gamma, &mut rng);
                let d = rand_distr::Poisson::new(lambda.max(1e-12)).unwrap();
                counts[i * p + j] = rand_distr::Distribution::sample(&d, &mut rng);
            }
        }
        let (fit, y) = fixture(counts, n, p);
        let mut rng2 = stream(13, Phase::Diagnostics, 1, 0);
        let tables = diagnostics(&fit, &y, &mut rng2).unwrap();
        for r in &tables.mean_variance {
            let expected = r.mean + r.mean * r.mean;
            assert!(
                r.variance > r.mean,
                "taxon {} variance {} not above mean {}",
                r.taxon,
                r.variance,
                r.mean
            );
            let rel = (r.variance - expected).abs() / expected;
            assert!(
                rel < 0.5,
                "taxon {} variance {} far from mu + mu^2 = {expected}",
                r.taxon,
                r.variance
            );
        }
    }

    #[test]
    fn constant_zero_taxon_emits_zero_row() {
        let n = 10;
        let mut counts = vec![0.0; n * 2];
        let mut rng = stream(5, Phase::Diagnostics, 0, 0);
        for i in 0..n {
            counts[i * 2] = (rng.random::<f64>() * 4.0).floor();
        }
        let (fit, y) = fixture(counts, n, 2);
        let mut rng2 = stream(5, Phase::Diagnostics, 1, 0);
        let tables = diagnostics(&fit, &y, &mut rng2).unwrap();
        let row = &tables.mean_variance[1];
        assert_eq!(row.mean, 0.0);
        assert_eq!(row.variance, 0.0);
        assert_eq!(tables.residual_fit.len(), n * 2);
    }

    #[test]
    fn csv_writers_emit_fixed_headers() {
        let dir = tempfile::tempdir().unwrap();
        let mv = dir.path().join("mv.csv");
        let rf = dir.path().join("rf.csv");
        write_mean_variance_csv(
            &[MeanVarianceRow {
                taxon: "t0".to_string(),
                mean: 1.5,
                variance: 2.25,
            }],
            &mv,
        )
        .unwrap();
        write_residual_fit_csv(
            &[ResidualFitRow {
                sample: "s0".to_string(),
                taxon: "t0".to_string(),
                eta: 0.3,
                residual: -1.2,
            }],
            &rf,
        )
        .unwrap();
        let mv_text = std::fs::read_to_string(&mv).unwrap();
        assert!(mv_text.starts_with("taxon,mean,variance\n"));
        let rf_text = std::fs::read_to_string(&rf).unwrap();
        assert!(rf_text.starts_with("sample,taxon,eta,residual\n"));
    }
}
