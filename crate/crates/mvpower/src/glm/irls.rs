//! Single-taxon GLM fitting by iteratively reweighted least squares, with
//! profile-likelihood dispersion estimation for the negative binomial family.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::glm::family::Family;

/// Bounds for the negative-binomial dispersion search (on phi itself).
pub const PHI_MIN: f64 = 1e-3;
pub const PHI_MAX: f64 = 1e6;

/// Linear predictors are clamped to this magnitude inside iterations to keep
/// means finite while coefficients move through extreme intermediate values.
const ETA_CLAMP: f64 = 30.0;

/// Linear predictor assigned to every row of a degenerate (all-zero or
/// all-one) taxon; the corresponding mean is numerically zero (or one) but the
/// likelihood stays finite.
pub const DEGENERATE_ETA: f64 = 20.0;

/// Smallest mean used in weights and likelihoods.
const MU_FLOOR: f64 = 1e-10;

/// Golden-section iterations for the 1-D dispersion search; enough to localize
/// log(phi) to ~1e-7 over the full search interval.
const PHI_GOLDEN_ITERS: usize = 40;

/// Iteration controls for a single-taxon fit.
#[derive(Debug, Clone)]
pub struct FitControls {
    /// Maximum IRLS iterations per (beta | phi) solve.
    pub max_iter: usize,
    /// Relative deviance-change convergence tolerance.
    pub tol: f64,
    /// Maximum (IRLS, dispersion) alternations for the negative binomial.
    pub max_outer: usize,
}

impl Default for FitControls {
    fn default() -> Self {
        FitControls {
            max_iter: 100,
            tol: 1e-8,
            max_outer: 50,
        }
    }
}

/// Result of fitting one taxon.
#[derive(Debug, Clone)]
pub struct TaxonFit {
    pub beta: DVector<f64>,
    /// Dispersion estimate (negative binomial only).
    pub phi: Option<f64>,
    /// Fitted means, one per row.
    pub mu: Vec<f64>,
    /// Exact log-likelihood at the returned parameters.
    pub loglik: f64,
    /// Residual deviance at the returned parameters.
    pub deviance: f64,
    pub converged: bool,
    /// True when the response was constant at a boundary (all zeros, or all
    /// ones for presence/absence) and the fit was pinned rather than iterated.
    pub degenerate: bool,
    /// IRLS iterations used (summed over dispersion alternations).
    pub iterations: usize,
    /// Deviance after each accepted IRLS step.
    pub trace: Vec<f64>,
}

/// Precomputed per-taxon quantities reused across likelihood evaluations.
struct TaxonData<'a> {
    y: &'a [f64],
    /// Σ ln Γ(y_i + 1).
    sum_lgamma_y1: f64,
    /// Largest observed count.
    max_y: usize,
    /// hist[k] = number of rows with y = k (count families only).
    hist: Vec<f64>,
}

impl<'a> TaxonData<'a> {
    fn new(y: &'a [f64], family: Family) -> TaxonData<'a> {
        let mut sum_lgamma_y1 = 0.0;
        let mut max_y = 0usize;
        for &v in y {
            sum_lgamma_y1 += statrs::function::gamma::ln_gamma(v + 1.0);
            max_y = max_y.max(v as usize);
        }
        let hist = match family {
            Family::Binomial => Vec::new(),
            _ => {
                let mut h = vec![0.0; max_y + 1];
                for &v in y {
                    h[v as usize] += 1.0;
                }
                h
            }
        };
        TaxonData {
            y,
            sum_lgamma_y1,
            max_y,
            hist,
        }
    }

    /// Log-likelihood at means `mu` (already floored/clamped) and dispersion
    /// `phi` (negative binomial only).
    fn loglik(&self, family: Family, mu: &[f64], phi: f64) -> f64 {
        match family {
            Family::Poisson => {
                let mut ll = -self.sum_lgamma_y1;
                for (&y, &m) in self.y.iter().zip(mu) {
                    ll -= m;
                    if y > 0.0 {
                        ll += y * m.ln();
                    }
                }
                ll
            }
            Family::NegativeBinomial => {
                let mut ll = self.lgamma_ratio_sum(phi) - self.sum_lgamma_y1
                    + (self.y.len() as f64) * phi * phi.ln();
                for (&y, &m) in self.y.iter().zip(mu) {
                    ll -= (y + phi) * (phi + m).ln();
                    if y > 0.0 {
                        ll += y * m.ln();
                    }
                }
                ll
            }
            Family::Binomial => {
                let mut ll = 0.0;
                for (&y, &m) in self.y.iter().zip(mu) {
                    ll += if y > 0.5 { m.ln() } else { (1.0 - m).ln() };
                }
                ll
            }
        }
    }

    /// Σ_i [ln Γ(y_i + phi) − ln Γ(phi)], computed by the recurrence
    /// ln Γ(k + phi) − ln Γ(phi) = Σ_{t<k} ln(phi + t), which avoids
    /// cancellation between two large gamma values.
    fn lgamma_ratio_sum(&self, phi: f64) -> f64 {
        let mut total = 0.0;
        let mut acc = 0.0;
        for k in 1..=self.max_y {
            acc += (phi + (k - 1) as f64).ln();
            let h = self.hist[k];
            if h > 0.0 {
                total += h * acc;
            }
        }
        total
    }

    /// Log-likelihood of the saturated model (mean = observation), used to turn
    /// log-likelihoods into deviances.
    fn saturated_loglik(&self, family: Family, phi: f64) -> f64 {
        match family {
            Family::Poisson => {
                let mut ll = -self.sum_lgamma_y1;
                for &y in self.y {
                    if y > 0.0 {
                        ll += y * y.ln() - y;
                    }
                }
                ll
            }
            Family::NegativeBinomial => {
                let mut ll = -self.sum_lgamma_y1;
                let mut lg = 0.0;
                for k in 0..=self.max_y {
                    if k > 0 {
                        lg += (phi + (k - 1) as f64).ln();
                    }
                    let h = self.hist[k];
                    if h > 0.0 && k > 0 {
                        let kf = k as f64;
                        ll += h * (lg + phi * (phi / (phi + kf)).ln()
                            + kf * (kf / (phi + kf)).ln());
                    }
                }
                ll
            }
            Family::Binomial => 0.0,
        }
    }
}

struct IrlsOutcome {
    beta: DVector<f64>,
    mu: Vec<f64>,
    loglik: f64,
    deviance: f64,
    converged: bool,
    iterations: usize,
    trace: Vec<f64>,
}

/// Mean vector from a linear predictor, clamped away from boundaries.
fn means_from_eta(family: Family, eta: &DVector<f64>, mu: &mut Vec<f64>) {
    mu.clear();
    match family {
        Family::Poisson | Family::NegativeBinomial => {
            for &e in eta.iter() {
                mu.push(e.clamp(-ETA_CLAMP, ETA_CLAMP).exp().max(MU_FLOOR));
            }
        }
        Family::Binomial => {
            for &e in eta.iter() {
                let p = 1.0 / (1.0 + (-e.clamp(-ETA_CLAMP, ETA_CLAMP)).exp());
                mu.push(p.clamp(MU_FLOOR, 1.0 - MU_FLOOR));
            }
        }
    }
}

/// One weighted least-squares solve: returns the proposed coefficient vector,
/// or None when the weighted normal equations are numerically singular.
fn wls_step(
    x: &DMatrix<f64>,
    family: Family,
    phi: f64,
    y: &[f64],
    eta: &DVector<f64>,
    mu: &[f64],
) -> Option<DVector<f64>> {
    let n = x.nrows();
    let k = x.ncols();
    let mut xtwx = DMatrix::<f64>::zeros(k, k);
    let mut xtwz = DVector::<f64>::zeros(k);
    for i in 0..n {
        let m = mu[i];
        // Weight w = (dmu/deta)^2 / Var; working response z = eta + (y - mu) / (dmu/deta).
        let (w, z) = match family {
            Family::Poisson => (m, eta[i] + (y[i] - m) / m),
            Family::NegativeBinomial => {
                (m * phi / (phi + m), eta[i] + (y[i] - m) / m)
            }
            Family::Binomial => {
                let d = m * (1.0 - m);
                (d, eta[i] + (y[i] - m) / d)
            }
        };
        for a in 0..k {
            let xa = x[(i, a)];
            let wxa = w * xa;
            xtwz[a] += wxa * z;
            for b in a..k {
                xtwx[(a, b)] += wxa * x[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    match xtwx.clone().cholesky() {
        Some(ch) => Some(ch.solve(&xtwz)),
        None => {
            // Ridge fallback for transient near-singular weight configurations.
            let ridge = 1e-8 * (xtwx.trace() / k as f64).max(1e-300);
            for d in 0..k {
                xtwx[(d, d)] += ridge;
            }
            xtwx.cholesky().map(|ch| ch.solve(&xtwz))
        }
    }
}

/// IRLS at fixed dispersion. Step-halves on deviance increase; converges on
/// relative deviance change.
fn irls_fixed_phi(
    data: &TaxonData,
    x: &DMatrix<f64>,
    family: Family,
    phi: f64,
    beta_init: DVector<f64>,
    controls: &FitControls,
    record_trace: bool,
) -> IrlsOutcome {
    let sat = data.saturated_loglik(family, phi);
    let mut beta = beta_init;
    let mut eta = x * &beta;
    let mut mu: Vec<f64> = Vec::with_capacity(x.nrows());
    means_from_eta(family, &eta, &mut mu);
    let mut ll = data.loglik(family, &mu, phi);
    let mut deviance = 2.0 * (sat - ll);
    let mut converged = false;
    let mut iterations = 0;
    let mut trace = Vec::new();
    let mut cand_mu: Vec<f64> = Vec::with_capacity(x.nrows());

    for _ in 0..controls.max_iter {
        iterations += 1;
        let proposal = match wls_step(x, family, phi, data.y, &eta, &mu) {
            Some(b) => b,
            None => break,
        };
        // Step-halving: walk the proposal back toward the current point until
        // the deviance does not increase.
        let mut accepted = false;
        let mut cand = proposal;
        for _ in 0..30 {
            let cand_eta = x * &cand;
            means_from_eta(family, &cand_eta, &mut cand_mu);
            let cand_ll = data.loglik(family, &cand_mu, phi);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-10 * (1.0 + ll.abs()) {
                beta = cand;
                eta = cand_eta;
                std::mem::swap(&mut mu, &mut cand_mu);
                let new_dev = 2.0 * (sat - cand_ll);
                let rel = (deviance - new_dev).abs() / (new_dev.abs() + 0.1);
                ll = cand_ll;
                deviance = new_dev;
                if record_trace {
                    trace.push(deviance);
                }
                accepted = true;
                if rel < controls.tol {
                    converged = true;
                }
                break;
            }
            cand = (&cand + &beta) * 0.5;
        }
        if !accepted || converged {
            break;
        }
    }

    IrlsOutcome {
        beta,
        mu,
        loglik: ll,
        deviance,
        converged,
        iterations,
        trace,
    }
}

/// Maximize the negative-binomial log-likelihood over phi at fixed means by
/// golden-section search on log(phi). Returns (phi, loglik at phi).
fn profile_phi(data: &TaxonData, mu: &[f64]) -> (f64, f64) {
    // Group rows sharing a mean so each evaluation is O(max_y + #groups):
    // designs built from a few covariate patterns collapse to a handful of
    // distinct means.
    let mut order: Vec<usize> = (0..mu.len()).collect();
    order.sort_unstable_by(|&a, &b| mu[a].total_cmp(&mu[b]));
    let mut groups: Vec<(f64, f64, f64)> = Vec::new(); // (mu, count, sum_y)
    for &i in &order {
        match groups.last_mut() {
            Some((gm, c, sy)) if *gm == mu[i] => {
                *c += 1.0;
                *sy += data.y[i];
            }
            _ => groups.push((mu[i], 1.0, data.y[i])),
        }
    }
    let const_y_lnmu: f64 = data
        .y
        .iter()
        .zip(mu)
        .filter(|(&y, _)| y > 0.0)
        .map(|(&y, &m)| y * m.ln())
        .sum();
    let n = data.y.len() as f64;

    let eval = |t: f64| -> f64 {
        let phi = t.exp();
        let mut ll = data.lgamma_ratio_sum(phi) - data.sum_lgamma_y1 + const_y_lnmu
            + n * phi * t;
        for &(gm, c, sy) in &groups {
            ll -= (sy + phi * c) * (phi + gm).ln();
        }
        ll
    };

    let inv_golden = 0.618_033_988_749_894_9_f64;
    let mut lo = PHI_MIN.ln();
    let mut hi = PHI_MAX.ln();
    let mut t1 = hi - inv_golden * (hi - lo);
    let mut t2 = lo + inv_golden * (hi - lo);
    let mut f1 = eval(t1);
    let mut f2 = eval(t2);
    for _ in 0..PHI_GOLDEN_ITERS {
        if f1 < f2 {
            lo = t1;
            t1 = t2;
            f1 = f2;
            t2 = lo + inv_golden * (hi - lo);
            f2 = eval(t2);
        } else {
            hi = t2;
            t2 = t1;
            f2 = f1;
            t1 = hi - inv_golden * (hi - lo);
            f1 = eval(t1);
        }
    }
    let t = if f1 > f2 { t1 } else { t2 };
    (t.exp(), if f1 > f2 { f1 } else { f2 })
}

/// Starting coefficients: intercept at the link of the (guarded) sample mean,
/// remaining coefficients zero.
fn initial_beta(family: Family, y: &[f64], k: usize) -> DVector<f64> {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let b0 = match family {
        Family::Poisson | Family::NegativeBinomial => mean.max(1e-2).ln(),
        Family::Binomial => {
            let p = mean.clamp(1e-2, 1.0 - 1e-2);
            (p / (1.0 - p)).ln()
        }
    };
    let mut beta = DVector::zeros(k);
    beta[0] = b0;
    beta
}

/// Method-of-moments starting dispersion.
fn initial_phi(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    if var > 1.05 * mean && mean > 0.0 {
        (mean * mean / (var - mean)).clamp(PHI_MIN, PHI_MAX)
    } else {
        // Not visibly overdispersed: start near the Poisson limit.
        1e4
    }
}

/// Fit one taxon. `fixed_phi` pins the negative-binomial dispersion (used when
/// refitting a null model with the dispersion taken from the alternative fit);
/// when absent, dispersion is estimated by profile maximum likelihood.
pub fn fit_taxon(
    y: &[f64],
    x: &DMatrix<f64>,
    family: Family,
    fixed_phi: Option<f64>,
    controls: &FitControls,
    record_trace: bool,
) -> Result<TaxonFit> {
    let n = x.nrows();
    let k = x.ncols();
    if y.len() != n {
        return Err(Error::validation(format!(
            "response has {} rows but the model matrix has {n}",
            y.len()
        )));
    }
    if family == Family::Binomial {
        if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::validation(format!(
                "binomial family requires presence/absence (0/1) counts, found {bad}"
            )));
        }
    }

    let data = TaxonData::new(y, family);

    // Boundary-constant responses cannot be fit by IRLS; pin the linear
    // predictor at a floor so likelihoods stay finite and downstream statistics
    // see a zero contribution.
    let all_zero = y.iter().all(|&v| v == 0.0);
    let all_one = family == Family::Binomial && y.iter().all(|&v| v == 1.0);
    if all_zero || all_one {
        let eta0 = if all_zero { -DEGENERATE_ETA } else { DEGENERATE_ETA };
        let mut beta = DVector::zeros(k);
        beta[0] = eta0;
        let eta = DVector::from_element(n, eta0);
        let mut mu = Vec::with_capacity(n);
        means_from_eta(family, &eta, &mut mu);
        let phi = match family {
            Family::NegativeBinomial => Some(fixed_phi.unwrap_or(PHI_MAX)),
            _ => None,
        };
        let ll = data.loglik(family, &mu, phi.unwrap_or(1.0));
        let sat = data.saturated_loglik(family, phi.unwrap_or(1.0));
        return Ok(TaxonFit {
            beta,
            phi,
            mu,
            loglik: ll,
            deviance: 2.0 * (sat - ll),
            converged: false,
            degenerate: true,
            iterations: 0,
            trace: Vec::new(),
        });
    }

    let beta0 = initial_beta(family, y, k);
    match (family, fixed_phi) {
        (Family::NegativeBinomial, None) => {
            // Alternate IRLS for beta with 1-D profile maximization for phi
            // until the joint log-likelihood stabilizes.
            let mut phi = initial_phi(y);
            let mut beta = beta0;
            let mut last: Option<IrlsOutcome> = None;
            let mut prev_ll = f64::NEG_INFINITY;
            let mut outer_converged = false;
            let mut iterations = 0;
            for _ in 0..controls.max_outer {
                let out = irls_fixed_phi(&data, x, family, phi, beta, controls, record_trace);
                iterations += out.iterations;
                beta = out.beta.clone();
                let (new_phi, ll_at_phi) = profile_phi(&data, &out.mu);
                phi = new_phi;
                last = Some(out);
                if (ll_at_phi - prev_ll).abs() < controls.tol * (ll_at_phi.abs() + 0.1) {
                    outer_converged = true;
                    break;
                }
                prev_ll = ll_at_phi;
            }
            // Final IRLS pass at the settled dispersion so beta, mu, and the
            // reported likelihood all correspond to the same phi.
            let out = irls_fixed_phi(&data, x, family, phi, beta, controls, record_trace);
            iterations += out.iterations;
            let inner_converged = out.converged;
            let mut result = finish(out, Some(phi), iterations);
            result.converged = inner_converged && outer_converged;
            if let Some(prev) = last {
                debug_assert!(
                    result.loglik >= prev.loglik - 1e-6 * (1.0 + prev.loglik.abs()),
                    "likelihood decreased across dispersion alternation"
                );
            }
            Ok(result)
        }
        (Family::NegativeBinomial, Some(phi)) => {
            if !(phi.is_finite() && phi > 0.0) {
                return Err(Error::validation(format!(
                    "fixed dispersion must be finite and positive, got {phi}"
                )));
            }
            let out = irls_fixed_phi(&data, x, family, phi, beta0, controls, record_trace);
            let iters = out.iterations;
            Ok(finish(out, Some(phi), iters))
        }
        _ => {
            let out = irls_fixed_phi(&data, x, family, 1.0, beta0, controls, record_trace);
            let iters = out.iterations;
            Ok(finish(out, None, iters))
        }
    }
}

fn finish(out: IrlsOutcome, phi: Option<f64>, iterations: usize) -> TaxonFit {
    TaxonFit {
        beta: out.beta,
        phi,
        mu: out.mu,
        loglik: out.loglik,
        deviance: out.deviance,
        converged: out.converged,
        degenerate: false,
        iterations,
        trace: out.trace,
    }
}
