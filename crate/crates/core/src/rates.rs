//! Closed-form convergence-rate formulas for the adaptive estimator:
//! the pointwise rate over Hoelder-type balls and the three-regime global
//! rate over Nikolskii-type balls, together with the matching minimax
//! lower bounds.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A rate query; `p = inf` selects the Hoelder case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateQuery {
    pub n: u64,
    pub beta: f64,
    pub l: f64,
    /// Integrability index in `(1, inf]`.
    pub p: f64,
    /// Risk order `r >= 1`.
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `(2 beta + 1) p > r`
    Dense,
    /// `(2 beta + 1) p = r`
    Boundary,
    /// `(2 beta + 1) p < r`
    Sparse,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::Dense => write!(f, "dense"),
            Regime::Boundary => write!(f, "boundary"),
            Regime::Sparse => write!(f, "sparse"),
        }
    }
}

/// Upper and lower global rates plus the regime they fall in. In the
/// boundary regime the two differ by exactly `ln^{1/r}(n)` and the true
/// minimax rate between them is unknown; in the sparse regime they agree
/// and the adaptive estimator is rate optimal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalRate {
    pub upper: f64,
    pub lower: f64,
    pub regime: Regime,
}

fn validate(q: &RateQuery) -> Result<()> {
    if q.n < 3 {
        return Err(Error::invalid("rate formulas need n >= 3"));
    }
    if !(q.beta > 0.0) || !(q.l > 0.0) {
        return Err(Error::invalid("beta and L must be positive"));
    }
    if !(q.p > 1.0) {
        return Err(Error::invalid("p must exceed 1"));
    }
    if !(q.r >= 1.0) {
        return Err(Error::invalid("r must be at least 1"));
    }
    Ok(())
}

/// Pointwise adaptive rate `L^{1/(2b+1)} (ln(n)/n)^{b/(2b+1)}`.
pub fn pointwise_rate(q: &RateQuery) -> Result<f64> {
    validate(q)?;
    let nf = q.n as f64;
    let expo = q.beta / (2.0 * q.beta + 1.0);
    Ok(q.l.powf(1.0 / (2.0 * q.beta + 1.0)) * (nf.ln() / nf).powf(expo))
}

/// Global rate over the integrability-`p` ball, both bounds.
pub fn global_rate(q: &RateQuery) -> Result<GlobalRate> {
    validate(q)?;
    if q.p.is_finite() && q.beta * q.p <= 1.0 {
        return Err(Error::invalid(format!(
            "global rates need beta * p > 1, got {} * {}",
            q.beta, q.p
        )));
    }
    let nf = q.n as f64;
    let log_over_n = nf.ln() / nf;
    let dense_log =
        q.l.powf(1.0 / (2.0 * q.beta + 1.0)) * log_over_n.powf(q.beta / (2.0 * q.beta + 1.0));
    let dense_plain =
        q.l.powf(1.0 / (2.0 * q.beta + 1.0)) * nf.powf(-q.beta / (2.0 * q.beta + 1.0));

    // p = inf is the Hoelder case and always dense
    let lhs = if q.p.is_finite() {
        (2.0 * q.beta + 1.0) * q.p
    } else {
        f64::INFINITY
    };

    if lhs > q.r {
        return Ok(GlobalRate {
            upper: dense_log,
            lower: dense_plain,
            regime: Regime::Dense,
        });
    }
    if lhs == q.r {
        return Ok(GlobalRate {
            upper: dense_log * nf.ln().powf(1.0 / q.r),
            lower: dense_log,
            regime: Regime::Boundary,
        });
    }
    let l_expo = (0.5 - 1.0 / q.r) / (q.beta - 1.0 / q.p + 0.5);
    let n_expo = (q.beta - 1.0 / q.p + 1.0 / q.r) / (2.0 * q.beta - 2.0 / q.p + 1.0);
    let sparse = q.l.powf(l_expo) * log_over_n.powf(n_expo);
    Ok(GlobalRate {
        upper: sparse,
        lower: sparse,
        regime: Regime::Sparse,
    })
}
