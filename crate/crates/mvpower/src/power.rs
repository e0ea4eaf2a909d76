//! Monte Carlo power estimation for the multivariate sum-of-likelihood-ratio
//! test, at a hypothetical sample size, from a fitted copula model.
//!
//! Two estimators are provided. The critical-value method simulates one batch
//! of null datasets to locate the rejection threshold and one batch of
//! alternative datasets to count rejections, costing 2(n_power + n_resamp)
//! model fits. The nested method computes a full simulated p-value per
//! alternative dataset (with a copula refit per dataset), costing
//! 2 n_power (n_resamp + 1) fits; it serves as the slow reference the fast
//! method is validated against.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::copula::{fit_copula, CopulaModel, CopulaOptions, Simulator};
use crate::copula::factor::FactorControls;
use crate::effects::{effect_alt, effect_null, effect_null_with, CoefficientMatrix, EffectSpec};
use crate::error::{Error, Result};
use crate::glm::family::Family;
use crate::glm::manyglm::{
    fit_manyglm, fit_manyglm_with_dispersions, lr_statistic, ManyGlmFit,
};
use crate::glm::model_matrix::{build_model_matrix, ModelMatrix};
use crate::ingest::{AbundanceMatrix, DesignFrame, Workers};
use crate::rng::{derive_seed, stream, Phase};

/// Streams are indexed by a 24-bit dataset counter.
const MAX_SIMS: usize = (1 << 24) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerMethod {
    Critical,
    Nested,
}

impl PowerMethod {
    pub fn label(&self) -> &'static str {
        match self {
            PowerMethod::Critical => "critical",
            PowerMethod::Nested => "nested",
        }
    }

    pub fn parse(text: &str) -> Result<PowerMethod> {
        match text.trim().to_ascii_lowercase().as_str() {
            "critical" => Ok(PowerMethod::Critical),
            "nested" => Ok(PowerMethod::Nested),
            other => Err(Error::validation(format!(
                "unknown power method '{other}' (expected 'critical' or 'nested')"
            ))),
        }
    }
}

/// Settings shared by both power estimators.
#[derive(Debug, Clone)]
pub struct PowerSettings {
    /// Total sample size of the hypothetical study.
    pub n_total: usize,
    pub alpha: f64,
    /// Alternative-hypothesis simulations (power denominator).
    pub n_power: usize,
    /// Null simulations (critical value, or per-dataset p-value resolution).
    pub n_resamp: usize,
    pub seed: u64,
    pub workers: Workers,
}

impl PowerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::validation(format!(
                "alpha must be strictly between 0 and 1, got {}",
                self.alpha
            )));
        }
        if self.n_total == 0 {
            return Err(Error::validation("target sample size must be positive"));
        }
        if self.n_power == 0 || self.n_resamp == 0 {
            return Err(Error::validation(
                "simulation counts n_power and n_resamp must be positive",
            ));
        }
        if self.n_power > MAX_SIMS || self.n_resamp > MAX_SIMS {
            return Err(Error::validation(format!(
                "simulation counts are limited to {MAX_SIMS}"
            )));
        }
        Ok(())
    }
}

/// Outcome of a power run.
#[derive(Debug, Clone)]
pub struct PowerResult {
    pub method: PowerMethod,
    /// Estimated rejection probability under the alternative.
    pub power: f64,
    /// Binomial Monte Carlo standard error of `power`.
    pub mc_se: f64,
    /// Simulated critical value (critical-value method only).
    pub critical_value: Option<f64>,
    /// Null test statistics (critical-value method only).
    pub null_stats: Vec<f64>,
    /// Alternative test statistics, one per power simulation.
    pub alt_stats: Vec<f64>,
    /// Simulated p-values, one per power simulation (nested method only).
    pub p_values: Vec<f64>,
    /// Model-batch fits performed on simulated datasets.
    pub fit_count: u64,
    /// Test statistics evaluated on simulated datasets.
    pub stat_count: u64,
    pub wall_time_seconds: f64,
    pub warnings: Vec<String>,
}

/// Expand a pilot design to `n_total` rows, preserving the pilot's mix of
/// covariate patterns by largest-remainder apportionment (ties broken by first
/// appearance). Rows are grouped by pattern in first-appearance order.
pub fn extend_design(design: &DesignFrame, n_total: usize) -> Result<DesignFrame> {
    if n_total == 0 {
        return Err(Error::validation("target sample size must be positive"));
    }
    let n = design.n_rows();
    let mut keys: Vec<Vec<u64>> = Vec::new();
    let mut reps: Vec<usize> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for i in 0..n {
        let key = design.row_key(i);
        match keys.iter().position(|k| *k == key) {
            Some(g) => counts[g] += 1,
            None => {
                keys.push(key);
                reps.push(i);
                counts.push(1);
            }
        }
    }
    let g = reps.len();
    let mut alloc = vec![0usize; g];
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(g);
    let mut assigned = 0usize;
    for gi in 0..g {
        let quota = n_total as f64 * counts[gi] as f64 / n as f64;
        let base = quota.floor() as usize;
        alloc[gi] = base;
        assigned += base;
        remainders.push((quota - base as f64, gi));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut leftover = n_total.saturating_sub(assigned);
    for &(_, gi) in &remainders {
        if leftover == 0 {
            break;
        }
        alloc[gi] += 1;
        leftover -= 1;
    }
    let mut rows = Vec::with_capacity(n_total);
    for gi in 0..g {
        rows.extend(std::iter::repeat(reps[gi]).take(alloc[gi]));
    }
    Ok(design.select_rows(&rows))
}

fn build_pool(workers: Workers) -> Result<rayon::ThreadPool> {
    let threads = match workers {
        Workers::Auto => 0,
        Workers::Fixed(k) => k,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::numeric(format!("could not start worker pool: {e}")))
}

/// Fit the alternative and null models to one simulated dataset and return
/// both fits and the test statistic. Dispersions estimated under the
/// alternative are reused for the null fit.
fn fit_pair(
    y: Arc<AbundanceMatrix>,
    x_alt: &Arc<ModelMatrix>,
    x_null: &Arc<ModelMatrix>,
    family: Family,
) -> Result<(ManyGlmFit, ManyGlmFit, f64)> {
    let alt = fit_manyglm(Arc::clone(&y), Arc::clone(x_alt), family)?;
    let null = match alt.dispersions() {
        Some(phi) => {
            fit_manyglm_with_dispersions(Arc::clone(&y), Arc::clone(x_null), family, phi)?
        }
        None => fit_manyglm(y, Arc::clone(x_null), family)?,
    };
    let t = lr_statistic(&null, &alt)?.value;
    Ok((alt, null, t))
}

struct SimContext {
    x_alt: Arc<ModelMatrix>,
    x_null: Arc<ModelMatrix>,
    family: Family,
}

/// Common prologue: extend the design, rebuild model matrices at the target
/// size, and check the effect coefficients are aligned with them.
fn prepare(
    model: &CopulaModel,
    coeffs_alt: &CoefficientMatrix,
    term: &str,
    settings: &PowerSettings,
) -> Result<SimContext> {
    settings.validate()?;
    let margins = model.margins();
    let extended = Arc::new(extend_design(margins.model_matrix().design(), settings.n_total)?);
    let terms = margins.model_matrix().term_names();
    let x_alt = Arc::new(build_model_matrix(&extended, &terms)?);
    x_alt.term(term).ok_or_else(|| {
        Error::validation(format!(
            "term '{term}' is not in the model; terms present: [{}]",
            x_alt.term_names().join(", ")
        ))
    })?;
    if coeffs_alt.column_names != x_alt.column_names() {
        return Err(Error::validation(
            "effect coefficients are not aligned with the fitted model matrix".to_string(),
        ));
    }
    let x_null = Arc::new(x_alt.drop_term(term)?);
    Ok(SimContext {
        x_alt,
        x_null,
        family: margins.family(),
    })
}

/// Estimate power by the critical-value method: simulate `n_resamp` null
/// datasets to locate the upper-alpha quantile of the null statistic, then
/// `n_power` alternative datasets and count statistics beyond it.
pub fn powersim_critical(
    model: &CopulaModel,
    coeffs_alt: &CoefficientMatrix,
    term: &str,
    settings: &PowerSettings,
) -> Result<PowerResult> {
    let start = Instant::now();
    let ctx = prepare(model, coeffs_alt, term, settings)?;
    let coeffs_null = effect_null(model.margins(), term)?;
    let phi = model.margins().dispersions().map(<[f64]>::to_vec);
    let sim_null = Simulator::new(model, &coeffs_null, phi.as_deref(), &ctx.x_alt)?;
    let sim_alt = Simulator::new(model, coeffs_alt, phi.as_deref(), &ctx.x_alt)?;

    let pool = build_pool(settings.workers)?;
    let (null_stats, alt_stats) = pool.install(|| -> Result<(Vec<f64>, Vec<f64>)> {
        let null_stats = (0..settings.n_resamp)
            .into_par_iter()
            .map(|j| {
                let mut rng = stream(settings.seed, Phase::CriticalNull, j as u64, 0);
                let y = Arc::new(sim_null.draw(&mut rng));
                fit_pair(y, &ctx.x_alt, &ctx.x_null, ctx.family)
                    .map(|(_, _, t)| t)
                    .map_err(|e| e.with_context(&format!("null dataset {}", j + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        let alt_stats = (0..settings.n_power)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(settings.seed, Phase::CriticalAlt, i as u64, 0);
                let y = Arc::new(sim_alt.draw(&mut rng));
                fit_pair(y, &ctx.x_alt, &ctx.x_null, ctx.family)
                    .map(|(_, _, t)| t)
                    .map_err(|e| e.with_context(&format!("power dataset {}", i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok((null_stats, alt_stats))
    })?;

    let mut warnings = Vec::new();
    if null_stats.windows(2).all(|w| w[0] == w[1]) {
        warnings.push(
            "null statistics are all identical; the critical value is degenerate".to_string(),
        );
    }

    // Upper-alpha critical value as the order statistic at ceil((1-alpha) n).
    let mut sorted = null_stats.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = (((1.0 - settings.alpha) * settings.n_resamp as f64).ceil() as usize)
        .clamp(1, settings.n_resamp);
    let critical_value = sorted[rank - 1];

    let rejections = alt_stats.iter().filter(|&&t| t > critical_value).count();
    let power = rejections as f64 / settings.n_power as f64;
    let mc_se = (power * (1.0 - power) / settings.n_power as f64).sqrt();
    let fit_count = 2 * (settings.n_power as u64 + settings.n_resamp as u64);
    let stat_count = settings.n_power as u64 + settings.n_resamp as u64;

    Ok(PowerResult {
        method: PowerMethod::Critical,
        power,
        mc_se,
        critical_value: Some(critical_value),
        null_stats,
        alt_stats,
        p_values: Vec::new(),
        fit_count,
        stat_count,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        warnings,
    })
}

/// Estimate power by the nested method: for each alternative dataset, refit
/// the copula, simulate `n_resamp` null datasets from the refit, and reject
/// when the simulated p-value is at or below alpha.
pub fn powersim_nested(
    model: &CopulaModel,
    coeffs_alt: &CoefficientMatrix,
    term: &str,
    settings: &PowerSettings,
) -> Result<PowerResult> {
    let start = Instant::now();
    let ctx = prepare(model, coeffs_alt, term, settings)?;
    let phi = model.margins().dispersions().map(<[f64]>::to_vec);
    let sim_alt = Simulator::new(model, coeffs_alt, phi.as_deref(), &ctx.x_alt)?;
    let q = model.n_factors();
    let opts = CopulaOptions {
        n_randomizations: model.estimation().n_randomizations.max(1),
        factor: FactorControls::default(),
    };

    let pool = build_pool(settings.workers)?;
    let per_dataset = pool.install(|| -> Result<Vec<(f64, f64)>> {
        (0..settings.n_power)
            .into_par_iter()
            .map(|i| {
                let outer = |e: Error| e.with_context(&format!("power dataset {}", i + 1));
                let mut rng = stream(settings.seed, Phase::NestedAlt, i as u64, 0);
                let y = Arc::new(sim_alt.draw(&mut rng));
                let (fit_alt, fit_null, t_obs) =
                    fit_pair(Arc::clone(&y), &ctx.x_alt, &ctx.x_null, ctx.family)
                        .map_err(outer)?;

                // Refit the copula to this dataset, then simulate its own null.
                let mut resid_rng = stream(settings.seed, Phase::NestedResiduals, i as u64, 0);
                let refit = fit_copula(&fit_alt, &y, q, &opts, &mut resid_rng)
                    .map_err(|e| e.with_context(&format!("copula refit, power dataset {}", i + 1)))?;
                let coeffs_null = effect_null_with(&fit_alt, term, Some(&fit_null))
                    .map_err(|e| e.with_context(&format!("power dataset {}", i + 1)))?;
                let phi_i = fit_alt.dispersions().map(<[f64]>::to_vec);
                let sim_null =
                    Simulator::new(&refit, &coeffs_null, phi_i.as_deref(), &ctx.x_alt)
                        .map_err(|e| e.with_context(&format!("power dataset {}", i + 1)))?;

                let mut count_ge = 0usize;
                for j in 0..settings.n_resamp {
                    let mut rng_j =
                        stream(settings.seed, Phase::NestedNull, i as u64, j as u64);
                    let y0 = Arc::new(sim_null.draw(&mut rng_j));
                    let (_, _, t0) = fit_pair(y0, &ctx.x_alt, &ctx.x_null, ctx.family)
                        .map_err(|e| {
                            e.with_context(&format!(
                                "null dataset {} within power dataset {}",
                                j + 1,
                                i + 1
                            ))
                        })?;
                    if t0 >= t_obs {
                        count_ge += 1;
                    }
                }
                let p_hat = (1.0 + count_ge as f64) / (settings.n_resamp as f64 + 1.0);
                Ok((t_obs, p_hat))
            })
            .collect()
    })?;

    let alt_stats: Vec<f64> = per_dataset.iter().map(|&(t, _)| t).collect();
    let p_values: Vec<f64> = per_dataset.iter().map(|&(_, p)| p).collect();
    let rejections = p_values.iter().filter(|&&p| p <= settings.alpha).count();
    let power = rejections as f64 / settings.n_power as f64;
    let mc_se = (power * (1.0 - power) / settings.n_power as f64).sqrt();
    let fit_count = 2 * settings.n_power as u64 * (settings.n_resamp as u64 + 1);
    let stat_count = settings.n_power as u64 * (settings.n_resamp as u64 + 1);

    Ok(PowerResult {
        method: PowerMethod::Nested,
        power,
        mc_se,
        critical_value: None,
        null_stats: Vec::new(),
        alt_stats,
        p_values,
        fit_count,
        stat_count,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        warnings: Vec::new(),
    })
}

/// One grid point of a power curve.
#[derive(Debug, Clone)]
pub struct PowerCurveRow {
    pub effect_size: f64,
    pub n_total: usize,
    /// Seed derived for this point from the master seed and grid index.
    pub seed: u64,
    /// The point's result, or the error message if it failed.
    pub outcome: std::result::Result<PowerResult, String>,
}

/// Run the critical-value estimator over a grid of (effect size, sample size)
/// points, each with an independently derived seed. Points are evaluated in
/// ascending (effect size, sample size) order; a failing point is recorded and
/// the run continues.
pub fn power_curve(
    model: &CopulaModel,
    base: &EffectSpec,
    grid: &[(f64, usize)],
    settings: &PowerSettings,
) -> Result<Vec<PowerCurveRow>> {
    if grid.is_empty() {
        return Err(Error::validation("power curve grid is empty".to_string()));
    }
    let mut points = grid.to_vec();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut rows = Vec::with_capacity(points.len());
    for (idx, &(effect_size, n_total)) in points.iter().enumerate() {
        let seed = derive_seed(settings.seed, idx as u64);
        let mut point_settings = settings.clone();
        point_settings.seed = seed;
        point_settings.n_total = n_total;
        let mut spec = base.clone();
        spec.effect_size = effect_size;
        let outcome = effect_alt(model.margins(), &spec)
            .and_then(|coeffs| powersim_critical(model, &coeffs, &base.term, &point_settings))
            .map_err(|e| e.to_string());
        rows.push(PowerCurveRow {
            effect_size,
            n_total,
            seed,
            outcome,
        });
    }
    Ok(rows)
}

/// Write curve rows as CSV. Failed points carry their error message in the
/// final column and leave the numeric fields empty.
pub fn write_power_curve_csv(rows: &[PowerCurveRow], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "rho,N,power,mc_se,crit_value,fits,seconds,error").expect("in-memory write");
    for row in rows {
        match &row.outcome {
            Ok(res) => {
                let crit = res
                    .critical_value
                    .map(|c| format!("{c}"))
                    .unwrap_or_default();
                writeln!(
                    out,
                    "{},{},{},{},{},{},{:.3},",
                    row.effect_size,
                    row.n_total,
                    res.power,
                    res.mc_se,
                    crit,
                    res.fit_count,
                    res.wall_time_seconds
                )
                .expect("in-memory write");
            }
            Err(msg) => {
                writeln!(
                    out,
                    "{},{},,,,,,\"{}\"",
                    row.effect_size,
                    row.n_total,
                    msg.replace('"', "'")
                )
                .expect("in-memory write");
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.to_path_buf(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::{CopulaEstimation, CopulaModel};
    use crate::ingest::Column;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn three_group_design(per_group: usize) -> Arc<DesignFrame> {
        let mut codes = Vec::new();
        for g in 0..3u32 {
            codes.extend(std::iter::repeat(g).take(per_group));
        }
        Arc::new(
            DesignFrame::new(
                vec!["group".to_string()],
                vec![Column::Categorical {
                    levels: vec!["a".to_string(), "b".to_string(), "c".to_string()],
                    codes,
                }],
            )
            .unwrap(),
        )
    }

    fn group_sizes(design: &DesignFrame) -> Vec<usize> {
        match design.column("group").unwrap() {
            Column::Categorical { codes, .. } => {
                let mut sizes = vec![0usize; 3];
                for &c in codes {
                    sizes[c as usize] += 1;
                }
                sizes
            }
            _ => panic!("expected categorical"),
        }
    }

    #[test]
    fn extend_design_matches_worked_examples() {
        let d = three_group_design(3);
        assert_eq!(group_sizes(&extend_design(&d, 99).unwrap()), vec![33, 33, 33]);
        assert_eq!(group_sizes(&extend_design(&d, 100).unwrap()), vec![34, 33, 33]);

        // Shares 2/3 and 1/3 at N = 9.
        let d2 = Arc::new(
            DesignFrame::new(
                vec!["group".to_string()],
                vec![Column::Categorical {
                    levels: vec!["a".to_string(), "b".to_string()],
                    codes: vec![0, 0, 0, 0, 1, 1],
                }],
            )
            .unwrap(),
        );
        let ext = extend_design(&d2, 9).unwrap();
        match ext.column("group").unwrap() {
            Column::Categorical { codes, .. } => {
                assert_eq!(codes.iter().filter(|&&c| c == 0).count(), 6);
                assert_eq!(codes.iter().filter(|&&c| c == 1).count(), 3);
                // Grouped by pattern in first-appearance order.
                assert!(codes.windows(2).all(|w| w[0] <= w[1]));
            }
            _ => unreachable!(),
        }
    }

    proptest! {
        #[test]
        fn extend_design_allocations_are_proportional(
            counts in proptest::collection::vec(1usize..6, 1..5),
            n_total in 1usize..200,
        ) {
            let n: usize = counts.iter().sum();
            let mut codes = Vec::new();
            for (g, &c) in counts.iter().enumerate() {
                codes.extend(std::iter::repeat(g as u32).take(c));
            }
            let levels = (0..counts.len()).map(|g| format!("l{g}")).collect();
            let d = DesignFrame::new(
                vec!["g".to_string()],
                vec![Column::Categorical { levels, codes }],
            )
            .unwrap();
            let ext = extend_design(&d, n_total).unwrap();
            prop_assert_eq!(ext.n_rows(), n_total);
            match ext.column("g").unwrap() {
                Column::Categorical { codes, .. } => {
                    for (g, &c) in counts.iter().enumerate() {
                        let got = codes.iter().filter(|&&x| x as usize == g).count() as f64;
                        let quota = n_total as f64 * c as f64 / n as f64;
                        prop_assert!(
                            (got - quota).abs() < 1.0 + 1e-9,
                            "group {g}: {got} rows vs quota {quota}"
                        );
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    /// Small three-group Poisson pilot with a hand-built one-factor copula.
    fn toy_power_model(group_means: [f64; 3]) -> (CopulaModel, ManyGlmFit) {
        let per_group = 4;
        let design = three_group_design(per_group);
        let x = Arc::new(build_model_matrix(&design, &["group".to_string()]).unwrap());
        let p = 3;
        // Deterministic pilot counts whose group means are near `group_means`.
        let mut counts = DMatrix::zeros(3 * per_group, p);
        for i in 0..3 * per_group {
            let g = i / per_group;
            for j in 0..p {
                let jitter = ((i * 7 + j * 13) % 3) as f64 - 1.0;
                counts[(i, j)] = (group_means[g] + jitter).max(0.0).round();
            }
        }
        let y = Arc::new(
            AbundanceMatrix::new(
                counts,
                (0..p).map(|j| format!("t{j}")).collect(),
                (0..3 * per_group).map(|i| format!("s{i}")).collect(),
            )
            .unwrap(),
        );
        let fit = fit_manyglm(Arc::clone(&y), x, Family::Poisson).unwrap();
        let loadings = DMatrix::from_iterator(p, 1, [0.5, 0.4, 0.3]);
        let uniq = DVector::from_iterator(p, [0.75, 0.84, 0.91]);
        let model = CopulaModel::from_parts(
            loadings,
            uniq,
            fit.clone(),
            CopulaEstimation {
                loglik: 0.0,
                iterations: 0,
                n_randomizations: 2,
                warnings: Vec::new(),
            },
        )
        .unwrap();
        (model, fit)
    }

    fn spec(rho: f64) -> EffectSpec {
        EffectSpec {
            term: "group".to_string(),
            effect_size: rho,
            increasers: vec!["t0".to_string()],
            decreasers: vec!["t1".to_string()],
        }
    }

    fn settings(n_total: usize, n_power: usize, n_resamp: usize, seed: u64) -> PowerSettings {
        PowerSettings {
            n_total,
            alpha: 0.05,
            n_power,
            n_resamp,
            seed,
            workers: Workers::Fixed(1),
        }
    }

    #[test]
    fn critical_value_is_the_exact_order_statistic() {
        let (model, fit) = toy_power_model([5.0, 5.0, 5.0]);
        let coeffs = effect_alt(&fit, &spec(1.5)).unwrap();
        let mut st = settings(18, 5, 40, 7);
        st.alpha = 0.1;
        let res = powersim_critical(&model, &coeffs, "group", &st).unwrap();
        let c = res.critical_value.unwrap();
        let above = res.null_stats.iter().filter(|&&t| t > c).count();
        // Exactly floor(alpha * n_resamp) null statistics exceed the cutoff.
        assert_eq!(above, 4);
        assert!(res.null_stats.contains(&c));
        assert_eq!(res.alt_stats.len(), 5);
        assert!(res.p_values.is_empty());
    }

    #[test]
    fn fit_and_stat_counts_follow_the_closed_forms() {
        let (model, fit) = toy_power_model([4.0, 4.0, 4.0]);
        let coeffs = effect_alt(&fit, &spec(1.4)).unwrap();
        let st = settings(12, 10, 10, 11);
        let crit = powersim_critical(&model, &coeffs, "group", &st).unwrap();
        assert_eq!(crit.fit_count, 2 * (10 + 10));
        assert_eq!(crit.stat_count, 10 + 10);

        let st2 = settings(12, 4, 3, 11);
        let nested = powersim_nested(&model, &coeffs, "group", &st2).unwrap();
        assert_eq!(nested.fit_count, 2 * 4 * (3 + 1));
        assert_eq!(nested.stat_count, 4 * (3 + 1));
        assert_eq!(nested.p_values.len(), 4);
        for &p in &nested.p_values {
            assert!(p >= 1.0 / 4.0 - 1e-12 && p <= 1.0);
        }
        // Cost ratio at the reference settings: 1000*1001 vs 2000 statistics.
        let nested_stats = 1000u64 * 1001;
        let critical_stats = 2000u64;
        assert_eq!(nested_stats as f64 / critical_stats as f64, 500.5);
    }

    #[test]
    fn size_is_near_alpha_when_effect_is_null() {
        // With rho = 1 the alternative generator carries no group effect, so
        // rejections at the simulated critical value occur at rate ~alpha.
        let (model, fit) = toy_power_model([5.0, 5.0, 5.0]);
        let coeffs = effect_alt(&fit, &spec(1.0)).unwrap();
        let st = settings(18, 400, 400, 21);
        let res = powersim_critical(&model, &coeffs, "group", &st).unwrap();
        let se = (0.05f64 * 0.95 / 400.0).sqrt();
        assert!(
            (res.power - 0.05).abs() <= 3.0 * se + 1e-9,
            "size {} departs from 0.05 (se {se})",
            res.power
        );
    }

    #[test]
    fn power_increases_with_effect_size() {
        let (model, fit) = toy_power_model([6.0, 6.0, 6.0]);
        let weak = effect_alt(&fit, &spec(1.2)).unwrap();
        let strong = effect_alt(&fit, &spec(2.5)).unwrap();
        let st = settings(24, 150, 150, 33);
        let p_weak = powersim_critical(&model, &weak, "group", &st).unwrap().power;
        let p_strong = powersim_critical(&model, &strong, "group", &st).unwrap().power;
        assert!(
            p_strong > p_weak + 0.1,
            "power {p_strong} at rho=2.5 vs {p_weak} at rho=1.2"
        );
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let (model, fit) = toy_power_model([5.0, 5.0, 5.0]);
        let coeffs = effect_alt(&fit, &spec(1.6)).unwrap();
        let mut st1 = settings(18, 30, 30, 99);
        let mut st4 = st1.clone();
        st1.workers = Workers::Fixed(1);
        st4.workers = Workers::Fixed(4);
        let r1 = powersim_critical(&model, &coeffs, "group", &st1).unwrap();
        let r4 = powersim_critical(&model, &coeffs, "group", &st4).unwrap();
        assert_eq!(r1.power, r4.power);
        assert_eq!(r1.critical_value, r4.critical_value);
        assert_eq!(r1.null_stats, r4.null_stats);
        assert_eq!(r1.alt_stats, r4.alt_stats);
        assert_eq!(r1.fit_count, r4.fit_count);
    }

    #[test]
    fn nested_and_critical_agree_at_desk_scale() {
        let (model, fit) = toy_power_model([6.0, 6.0, 6.0]);
        let coeffs = effect_alt(&fit, &spec(2.0)).unwrap();
        let crit = powersim_critical(&model, &coeffs, "group", &settings(18, 250, 250, 55))
            .unwrap();
        let nested = powersim_nested(&model, &coeffs, "group", &settings(18, 60, 60, 55))
            .unwrap();
        assert!(
            (crit.power - nested.power).abs() < 0.2,
            "critical {} vs nested {}",
            crit.power,
            nested.power
        );
    }

    #[test]
    fn single_point_curve_equals_direct_call() {
        let (model, fit) = toy_power_model([5.0, 5.0, 5.0]);
        let base = spec(1.5);
        let st = settings(18, 25, 25, 77);
        let rows = power_curve(&model, &base, &[(1.5, 18)], &st).unwrap();
        assert_eq!(rows.len(), 1);
        let row = &rows[0];
        let mut direct_settings = st.clone();
        direct_settings.seed = derive_seed(77, 0);
        let coeffs = effect_alt(&fit, &base).unwrap();
        let direct = powersim_critical(&model, &coeffs, "group", &direct_settings).unwrap();
        let got = row.outcome.as_ref().unwrap();
        assert_eq!(got.power, direct.power);
        assert_eq!(got.critical_value, direct.critical_value);
        assert_eq!(got.null_stats, direct.null_stats);
    }

    #[test]
    fn curve_rows_are_sorted_and_failures_are_recorded() {
        let (model, _fit) = toy_power_model([5.0, 5.0, 5.0]);
        let base = spec(1.3);
        let st = settings(18, 10, 10, 5);
        // N=2 cannot represent three groups: that point fails, the rest run.
        let rows = power_curve(
            &model,
            &base,
            &[(1.6, 12), (1.3, 12), (1.3, 2)],
            &st,
        )
        .unwrap();
        let keys: Vec<(f64, usize)> =
            rows.iter().map(|r| (r.effect_size, r.n_total)).collect();
        assert_eq!(keys, vec![(1.3, 2), (1.3, 12), (1.6, 12)]);
        assert!(rows[0].outcome.is_err());
        assert!(rows[1].outcome.is_ok());
        assert!(rows[2].outcome.is_ok());
        let msg = rows[0].outcome.as_ref().unwrap_err();
        assert!(!msg.is_empty());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_power_curve_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "rho,N,power,mc_se,crit_value,fits,seconds,error"
        );
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn rho_one_size_holds_for_nested_too() {
        let (model, fit) = toy_power_model([5.0, 5.0, 5.0]);
        let coeffs = effect_alt(&fit, &spec(1.0)).unwrap();
        let st = settings(15, 60, 39, 13);
        let res = powersim_nested(&model, &coeffs, "group", &st).unwrap();
        let se = (0.05f64 * 0.95 / 60.0).sqrt();
        // Wide net: 60 power sims only resolve gross size failures.
        assert!(
            (res.power - 0.05).abs() <= 3.0 * se + 0.05,
            "nested size {}",
            res.power
        );
    }

    #[test]
    fn misaligned_coefficients_are_rejected() {
        let (model, fit) = toy_power_model([5.0, 5.0, 5.0]);
        let mut coeffs = effect_alt(&fit, &spec(1.5)).unwrap();
        coeffs.column_names.swap(1, 2);
        let err = powersim_critical(&model, &coeffs, "group", &settings(18, 5, 5, 1));
        assert!(err.is_err());
    }

    #[test]
    fn settings_validation_catches_bad_alpha() {
        let st = PowerSettings {
            n_total: 30,
            alpha: 1.0,
            n_power: 10,
            n_resamp: 10,
            seed: 0,
            workers: Workers::Auto,
        };
        assert!(st.validate().is_err());
    }
}
