//! Randomized probability-integral-transform residuals (normal scores).
//!
//! For a discrete observation y with fitted margin F, draw u uniformly inside
//! the CDF jump [F(y-1), F(y)] and return z = Phi^-1(u). Under a correctly
//! specified model the scores are standard normal, which is what lets a
//! Gaussian factor model estimate between-taxon correlation from count data.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::glm::manyglm::ManyGlmFit;
use crate::ingest::AbundanceMatrix;

/// Probabilities are clamped to [EPS, 1 - EPS] before normal inversion so the
/// scores stay finite.
const EPS: f64 = 1e-10;

/// Normal-score residual matrix (n x p), one uniform draw per cell, row-major
/// draw order.
pub fn ds_residuals(
    fit: &ManyGlmFit,
    y: &AbundanceMatrix,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    if fit.data().as_ref() != y {
        return Err(Error::validation(
            "residuals requested for a count matrix that is not the one the model was fit to"
                .to_string(),
        ));
    }
    let n = y.n();
    let p = y.p();
    let family = fit.family();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut z = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            let obs = y.counts()[(i, j)];
            let mu = fit.fitted_means()[(i, j)];
            let phi = fit.dispersions().map_or(1.0, |d| d[j]);
            let lo = family.cdf(obs as i64 - 1, mu, phi);
            let mass = family.log_pmf(obs as u64, mu, phi).exp();
            let hi = (lo + mass).min(1.0);
            let v: f64 = rng.random();
            let u = (lo + v * (hi - lo)).clamp(EPS, 1.0 - EPS);
            z[(i, j)] = normal.inverse_cdf(u);
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::family::Family;
    use crate::glm::manyglm::fit_manyglm;
    use crate::glm::model_matrix::build_model_matrix;
    use crate::ingest::{Column, DesignFrame};
    use crate::rng::{stream, Phase};
    use std::sync::Arc;

    fn poisson_fixture() -> (ManyGlmFit, Arc<AbundanceMatrix>) {
        let rows: Vec<Vec<f64>> = vec![
            vec![0.0, 5.0],
            vec![2.0, 9.0],
            vec![1.0, 7.0],
            vec![0.0, 4.0],
            vec![3.0, 6.0],
            vec![1.0, 8.0],
            vec![2.0, 3.0],
            vec![0.0, 7.0],
        ];
        let n = rows.len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let y = Arc::new(
            AbundanceMatrix::new(
                DMatrix::from_row_slice(n, 2, &flat),
                vec!["a".to_string(), "b".to_string()],
                (0..n).map(|i| format!("s{i}")).collect(),
            )
            .unwrap(),
        );
        let design = Arc::new(
            DesignFrame::new(
                vec!["x".to_string()],
                vec![Column::Numeric {
                    values: (0..n).map(|i| i as f64 / n as f64).collect(),
                }],
            )
            .unwrap(),
        );
        let x = Arc::new(build_model_matrix(&design, &[]).unwrap());
        let fit = fit_manyglm(Arc::clone(&y), x, Family::Poisson).unwrap();
        (fit, y)
    }

    #[test]
    fn zero_cells_respect_pit_bounds() {
        let (fit, y) = poisson_fixture();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = stream(7, Phase::Diagnostics, 0, 0);
        let z = ds_residuals(&fit, &y, &mut rng).unwrap();
        for i in 0..y.n() {
            for j in 0..y.p() {
                if y.counts()[(i, j)] == 0.0 {
                    let mu = fit.fitted_means()[(i, j)];
                    let bound = normal.inverse_cdf(Family::Poisson.cdf(0, mu, 1.0));
                    assert!(
                        z[(i, j)] <= bound + 1e-12,
                        "zero-cell residual {} above Phi^-1(F(0)) = {bound}",
                        z[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn same_seed_reproduces_residuals() {
        let (fit, y) = poisson_fixture();
        let mut r1 = stream(123, Phase::Diagnostics, 4, 2);
        let mut r2 = stream(123, Phase::Diagnostics, 4, 2);
        let z1 = ds_residuals(&fit, &y, &mut r1).unwrap();
        let z2 = ds_residuals(&fit, &y, &mut r2).unwrap();
        assert_eq!(z1, z2);
    }

    #[test]
    fn residuals_are_roughly_standard_normal_under_truth() {
        // Simulate many iid Poisson(3) observations, fit intercept-only, and
        // check pooled first/second moments of the scores.
        use rand_distr::{Distribution, Poisson as PoissonDraw};
        let n = 400;
        let mut rng = stream(9, Phase::Diagnostics, 1, 0);
        let d = PoissonDraw::new(3.0).unwrap();
        let data: Vec<f64> = (0..n * 2).map(|_| d.sample(&mut rng)).collect();
        let y = Arc::new(
            AbundanceMatrix::new(
                DMatrix::from_row_slice(n, 2, &data),
                vec!["a".to_string(), "b".to_string()],
                (0..n).map(|i| format!("s{i}")).collect(),
            )
            .unwrap(),
        );
        let design = Arc::new(
            DesignFrame::new(
                vec!["g".to_string()],
                vec![Column::Numeric {
                    values: vec![0.0; n],
                }],
            )
            .unwrap(),
        );
        let x = Arc::new(build_model_matrix(&design, &[]).unwrap());
        let fit = fit_manyglm(Arc::clone(&y), x, Family::Poisson).unwrap();
        let z = ds_residuals(&fit, &y, &mut rng).unwrap();
        let all: Vec<f64> = z.iter().copied().collect();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let v = all.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (all.len() - 1) as f64;
        assert!(m.abs() < 0.1, "pooled mean {m} too far from 0");
        assert!((v - 1.0).abs() < 0.15, "pooled variance {v} too far from 1");
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let (fit, y) = poisson_fixture();
        let mut other = (*y).clone();
        let mut counts = other.counts().clone();
        counts[(0, 0)] += 1.0;
        other = AbundanceMatrix::new(
            counts,
            other.taxon_names().to_vec(),
            other.sample_ids().to_vec(),
        )
        .unwrap();
        let mut rng = stream(1, Phase::Diagnostics, 0, 0);
        assert!(ds_residuals(&fit, &other, &mut rng).is_err());
    }
}
