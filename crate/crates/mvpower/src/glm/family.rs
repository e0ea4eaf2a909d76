//! Count-data response families: log-likelihoods, distribution functions, links,
//! and cached quantile tables used by the simulator.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Hard cap on the support enumerated by a quantile table. Reaching it means the
/// requested mean/dispersion combination is far outside anything this tool is
/// meant to simulate, and almost always signals runaway coefficients.
const MAX_TABLE_LEN: usize = 20_000_000;

/// Cumulative mass at which table construction stops; the remaining tail
/// (at most 1e-12) is assigned to the last enumerated value.
const TABLE_TAIL: f64 = 1e-12;

/// Response family for the per-taxon regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Poisson counts with a log link.
    Poisson,
    /// Negative binomial counts (NB2: variance mu + mu^2/phi) with a log link.
    NegativeBinomial,
    /// Bernoulli presence/absence with a logit link.
    Binomial,
}

impl Family {
    /// Does this family carry a per-taxon dispersion parameter?
    pub fn has_dispersion(self) -> bool {
        matches!(self, Family::NegativeBinomial)
    }

    pub fn label(self) -> &'static str {
        match self {
            Family::Poisson => "poisson",
            Family::NegativeBinomial => "negative_binomial",
            Family::Binomial => "binomial",
        }
    }

    /// Parse a family name as it appears in config files and flags.
    pub fn parse(s: &str) -> Result<Family> {
        match s.trim().to_ascii_lowercase().as_str() {
            "poisson" => Ok(Family::Poisson),
            "negative_binomial" | "negative-binomial" | "negbin" | "nb" => {
                Ok(Family::NegativeBinomial)
            }
            "binomial" | "bernoulli" => Ok(Family::Binomial),
            other => Err(Error::validation(format!(
                "unknown family '{other}'; expected poisson, negative_binomial, or binomial"
            ))),
        }
    }

    /// Mean from the linear predictor.
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Poisson | Family::NegativeBinomial => eta.exp(),
            Family::Binomial => 1.0 / (1.0 + (-eta).exp()),
        }
    }

    /// Linear predictor from the mean.
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::Poisson | Family::NegativeBinomial => mu.ln(),
            Family::Binomial => (mu / (1.0 - mu)).ln(),
        }
    }

    /// Model variance at mean `mu` with dispersion `phi` (ignored unless the
    /// family has one).
    pub fn variance(self, mu: f64, phi: f64) -> f64 {
        match self {
            Family::Poisson => mu,
            Family::NegativeBinomial => mu + mu * mu / phi,
            Family::Binomial => mu * (1.0 - mu),
        }
    }

    /// Log probability mass at count `y`.
    pub fn log_pmf(self, y: u64, mu: f64, phi: f64) -> f64 {
        let yf = y as f64;
        match self {
            Family::Poisson => {
                if mu <= 0.0 {
                    return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
                }
                yf * mu.ln() - mu - ln_gamma(yf + 1.0)
            }
            Family::NegativeBinomial => {
                if mu <= 0.0 {
                    return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
                }
                let r = phi;
                ln_gamma(yf + r) - ln_gamma(r) - ln_gamma(yf + 1.0)
                    + r * (r / (r + mu)).ln()
                    + yf * (mu / (r + mu)).ln()
            }
            Family::Binomial => {
                let p = mu.clamp(1e-12, 1.0 - 1e-12);
                match y {
                    0 => (1.0 - p).ln(),
                    1 => p.ln(),
                    _ => f64::NEG_INFINITY,
                }
            }
        }
    }

    /// Distribution function F(y) = P(Y <= y); `y < 0` gives 0.
    ///
    /// Computed by direct summation of the mass function with the same recurrences
    /// as the quantile tables, so residuals and simulation share one definition of
    /// each margin.
    pub fn cdf(self, y: i64, mu: f64, phi: f64) -> f64 {
        if y < 0 {
            return 0.0;
        }
        match self {
            Family::Binomial => {
                if y >= 1 {
                    1.0
                } else {
                    1.0 - mu
                }
            }
            Family::Poisson | Family::NegativeBinomial => {
                if mu <= 0.0 {
                    return 1.0;
                }
                let y = y as u64;
                // Sum pmf(0..=y) via the stable recurrence.
                let mut p = self.log_pmf(0, mu, phi).exp();
                if p == 0.0 {
                    // Mass at 0 underflows (very large mean): delegate to a table,
                    // which starts its recurrence from an underflow-safe point.
                    let table = CdfTable::build(self, mu, phi).unwrap_or_else(|_| CdfTable {
                        offset: 0,
                        cum: vec![1.0],
                    });
                    return table.cdf(y as i64);
                }
                let mut total = p;
                let mut k = 0u64;
                while k < y {
                    p *= self.pmf_ratio(k, mu, phi);
                    k += 1;
                    total += p;
                    if p < 1e-300 && total > 1.0 - 1e-15 {
                        break;
                    }
                }
                total.min(1.0)
            }
        }
    }

    /// pmf(k+1) / pmf(k) for the count families.
    fn pmf_ratio(self, k: u64, mu: f64, phi: f64) -> f64 {
        let kf = k as f64;
        match self {
            Family::Poisson => mu / (kf + 1.0),
            Family::NegativeBinomial => {
                let r = phi;
                (kf + r) / (kf + 1.0) * (mu / (r + mu))
            }
            Family::Binomial => 0.0,
        }
    }
}

/// Cumulative distribution table for a single margin (one family / mean /
/// dispersion combination), supporting O(log n) quantile lookup.
///
/// Values below `offset` carry negligible mass (< 1e-300 each); `cum[i]` is
/// F(offset + i). Construction walks the mass recurrence from an underflow-safe
/// starting point and stops once cumulative mass reaches 1 - 1e-12; quantile
/// probes beyond that point return the last enumerated value.
#[derive(Debug, Clone)]
pub struct CdfTable {
    offset: u64,
    cum: Vec<f64>,
}

impl CdfTable {
    pub fn build(family: Family, mu: f64, phi: f64) -> Result<CdfTable> {
        match family {
            Family::Binomial => {
                if !(0.0..=1.0).contains(&mu) || !mu.is_finite() {
                    return Err(Error::numeric(format!(
                        "binomial mean {mu} outside [0, 1]"
                    )));
                }
                Ok(CdfTable {
                    offset: 0,
                    cum: vec![1.0 - mu, 1.0],
                })
            }
            Family::Poisson | Family::NegativeBinomial => Self::build_count(family, mu, phi),
        }
    }

    fn build_count(family: Family, mu: f64, phi: f64) -> Result<CdfTable> {
        if !mu.is_finite() || mu < 0.0 {
            return Err(Error::numeric(format!("mean {mu} is not a finite nonnegative value")));
        }
        if family == Family::NegativeBinomial && !(phi.is_finite() && phi > 0.0) {
            return Err(Error::numeric(format!(
                "dispersion {phi} is not finite and positive"
            )));
        }
        if mu == 0.0 {
            return Ok(CdfTable {
                offset: 0,
                cum: vec![1.0],
            });
        }

        // Start far enough below the mean that everything skipped is numerically
        // zero, using the log mass to seed the recurrence without underflow.
        let sd = family.variance(mu, phi).sqrt();
        let mut start = if mu > 256.0 {
            ((mu - 37.0 * sd).floor().max(0.0)) as u64
        } else {
            0
        };
        // The seed mass must survive exp(): move the start up until the log mass
        // clears the f64 underflow threshold. The mass skipped this way is below
        // e^-690 per point, negligible against the table's tail tolerance.
        let step = ((sd / 8.0).ceil()).max(1.0) as u64;
        while (start as f64) < mu && family.log_pmf(start, mu, phi) < -690.0 {
            start += step;
        }
        let log_p0 = family.log_pmf(start, mu, phi);
        let mut p = log_p0.exp();
        if !p.is_finite() {
            return Err(Error::numeric(format!(
                "mass function not finite at start of table (mu={mu}, phi={phi})"
            )));
        }
        let mut cum = Vec::with_capacity(64.min(MAX_TABLE_LEN));
        let mut total = p;
        cum.push(total);
        let mut k = start;
        // Keep going until the tail is negligible. `total` can stall short of 1
        // from rounding alone, so also stop when increments vanish well past the
        // mean.
        while total < 1.0 - TABLE_TAIL {
            if cum.len() >= MAX_TABLE_LEN {
                return Err(Error::numeric(format!(
                    "quantile table for mean {mu} exceeded {MAX_TABLE_LEN} entries; \
                     linear predictors are likely diverging"
                )));
            }
            p *= family.pmf_ratio(k, mu, phi);
            k += 1;
            total += p;
            cum.push(total);
            if p < 1e-280 && (k as f64) > mu + 1.0 {
                break;
            }
        }
        // Snap the last entry to 1 so quantile() always has a ceiling.
        if let Some(last) = cum.last_mut() {
            *last = last.max(1.0 - TABLE_TAIL);
        }
        Ok(CdfTable { offset: start, cum })
    }

    /// Smallest y with F(y) >= u. Probes above the enumerated mass return the
    /// largest tabled value.
    pub fn quantile(&self, u: f64) -> u64 {
        let idx = self.cum.partition_point(|&c| c < u);
        let idx = idx.min(self.cum.len() - 1);
        self.offset + idx as u64
    }

    /// F(y) as represented by the table (0 below the table start).
    pub fn cdf(&self, y: i64) -> f64 {
        if y < self.offset as i64 {
            return 0.0;
        }
        let idx = (y as u64 - self.offset) as usize;
        if idx >= self.cum.len() {
            1.0
        } else {
            self.cum[idx]
        }
    }

    /// Number of support points enumerated.
    pub fn len(&self) -> usize {
        self.cum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cum.is_empty()
    }
}
