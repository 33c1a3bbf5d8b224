//! Oracle-side functionals: the kernel approximation error of a link
//! function, its Hardy–Littlewood maximal smoothing, the oracle bandwidth
//! that balances approximation against noise, quadrature bias
//! functionals for the directional estimators, and a Monte Carlo risk
//! probe for the oracle estimator.
//!
//! Everything here is about the *true* link function; nothing reads
//! data except [`oracle_point_risk`], which simulates it.

use crate::error::{Error, Result};
use crate::estimators::{KernelEstimator, Sample};
use crate::geometry::{pair_matrix, single_matrix, Direction, Matrix2};
use crate::kernels::Kernel1D;
use crate::numeric::adaptive_simpson_with_breaks;
use rayon::prelude::*;
use std::sync::Arc;

/// An evaluable univariate link with smoothness metadata. The metadata is
/// descriptive (verified on grids where tests need it), not enforced.
#[derive(Clone)]
pub struct LinkFunction {
    eval: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub meta: LinkMeta,
}

#[derive(Clone, Debug)]
pub struct LinkMeta {
    pub kind: String,
    /// Smoothness order of the ball the link is built to live in.
    pub beta: f64,
    /// Radius of that ball.
    pub l: f64,
    /// Global envelope exponent (bounded + Hoelder of this order).
    pub beta0: f64,
    /// Global envelope constant.
    pub m: f64,
}

impl std::fmt::Debug for LinkFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinkFunction")
            .field("meta", &self.meta)
            .finish()
    }
}

impl LinkFunction {
    pub fn from_fn(
        kind: impl Into<String>,
        meta: (f64, f64, f64, f64),
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        let (beta, l, beta0, m) = meta;
        LinkFunction {
            eval: Arc::new(eval),
            meta: LinkMeta {
                kind: kind.into(),
                beta,
                l,
                beta0,
                m,
            },
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::from_fn("constant", (1.0, 0.0, 0.5, c.abs()), move |_| c)
    }

    pub fn linear(slope: f64) -> Self {
        Self::from_fn("linear", (1.0, slope.abs(), 0.5, f64::INFINITY), move |z| {
            slope * z
        })
    }

    pub fn sqrt_abs() -> Self {
        Self::from_fn("sqrt_abs", (0.5, 1.0, 0.5, f64::INFINITY), |z: f64| {
            z.abs().sqrt()
        })
    }

    #[inline]
    pub fn value(&self, z: f64) -> f64 {
        (self.eval)(z)
    }

    /// The link seen along a non-normalized index vector: `z -> f(c z)`.
    /// Estimating against the unit direction with this link is the same
    /// problem as estimating against the raw vector with the original.
    pub fn rescaled(&self, factor: f64) -> Self {
        let inner = self.eval.clone();
        let mut meta = self.meta.clone();
        meta.kind = format!("{}*{}", meta.kind, factor);
        meta.l *= factor.abs().max(1.0).powf(meta.beta);
        meta.m *= factor.abs().max(1.0).powf(meta.beta0);
        LinkFunction {
            eval: Arc::new(move |z| inner(factor * z)),
            meta,
        }
    }

    /// Grid check of the bounded+Hoelder envelope `(beta0, m)`.
    pub fn envelope_holds_on_grid(&self, lo: f64, hi: f64, points: usize) -> bool {
        let step = (hi - lo) / points as f64;
        let vals: Vec<f64> = (0..=points)
            .map(|i| self.value(lo + step * i as f64))
            .collect();
        let sup = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if sup > self.meta.m + 1e-12 {
            return false;
        }
        for gap in 1..=8usize {
            for i in 0..=(points - gap) {
                let dz = (gap as f64) * step;
                let ratio = (vals[i + gap] - vals[i]).abs() / dz.powf(self.meta.beta0);
                if sup + ratio > self.meta.m + 1e-9 {
                    return false;
                }
            }
        }
        true
    }
}

/// Inner smoothing error `| d^{-1} \int k((u-z)/d) [f(u) - f(z)] du |`
/// after the substitution `u = z + d v`.
fn smoothing_gap(link: &LinkFunction, k: &Kernel1D, delta: f64, z: f64) -> f64 {
    let fz = link.value(z);
    let breaks = k.breakpoints();
    let integrand = |v: f64| k.eval(v) * (link.value(z + delta * v) - fz);
    adaptive_simpson_with_breaks(&integrand, -0.5, 0.5, &breaks, 1e-10).abs()
}

/// Number of `2^{-1/8}` steps the bandwidth ladder descends below `h`.
const DELTA_LADDER_STEPS: u32 = 64;

/// Monotone approximation error `Delta(h, z)`: the sup over bandwidths
/// `delta <= h` of the kernel smoothing gap at `z`, with the sup taken on
/// the geometric ladder `h * 2^{-j/8}`.
pub fn approx_error(link: &LinkFunction, k: &Kernel1D, h: f64, z: f64) -> Result<f64> {
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::invalid("approx_error needs h in (0, 1]"));
    }
    let ratio = 2f64.powf(-1.0 / 8.0);
    let mut delta = h;
    let mut best = 0.0f64;
    for _ in 0..=DELTA_LADDER_STEPS {
        best = best.max(smoothing_gap(link, k, delta, z));
        delta *= ratio;
    }
    Ok(best)
}

/// Hardy–Littlewood maximal function of `Delta(h, .)` at `y`: the sup over
/// window radii of the window average. Radii run over `{2^{-j}}` down to
/// the grid step of the cached profile, plus the shrinking-window limit
/// `Delta(h, y)` itself, so the result always dominates `approx_error`.
pub fn maximal_approx_error(link: &LinkFunction, k: &Kernel1D, h: f64, y: f64) -> Result<f64> {
    // 2^8 intervals over [y-1, y+1]: step 1/128 aligns every dyadic
    // radius 2^{-j}, j <= 7, with the grid.
    const HALF_CELLS: usize = 128;
    let step = 1.0 / HALF_CELLS as f64;
    let profile: Vec<f64> = (0..=2 * HALF_CELLS)
        .map(|i| approx_error(link, k, h, y - 1.0 + step * i as f64))
        .collect::<Result<_>>()?;

    let mut best = profile[HALF_CELLS]; // the a -> 0 limit
    for j in 0..=7u32 {
        let m = HALF_CELLS >> j; // a = 2^{-j} spans m cells each side
        let lo = HALF_CELLS - m;
        // composite Simpson over 2m cells, divided by the window length
        let mut acc = profile[lo] + profile[lo + 2 * m];
        for i in 1..2 * m {
            acc += profile[lo + i] * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let integral = acc * step / 3.0;
        best = best.max(integral / (2.0 * 2f64.powi(-(j as i32))));
    }
    Ok(best)
}

/// Where the criterion scan ended up.
#[derive(Debug, Clone, Copy)]
pub struct OracleReport {
    pub h_star: f64,
    pub delta_star_at_h_star: f64,
    /// `sqrt(n h*) Delta*(h*, y) - sup_norm sqrt(ln n)`; nonpositive
    /// unless the lower-endpoint flag is set.
    pub criterion_slack: f64,
    /// Set when even `h_min` violates the criterion, which signals an
    /// inconsistent configuration (sample size below its minimum).
    pub at_lower_flag: bool,
}

/// Oracle bandwidth: the largest `h` in `[h_min, 1]` with
/// `sqrt(n h) Delta*(h, y) <= sup_norm sqrt(ln n)`, found by bisection on
/// the monotone criterion (relative tolerance 1e-4 on `h`).
pub fn oracle_bandwidth(
    link: &LinkFunction,
    k: &Kernel1D,
    n: u64,
    y: f64,
    h_min: f64,
) -> Result<OracleReport> {
    let profile = |h: f64| maximal_approx_error(link, k, h, y).expect("h stays in (0, 1]");
    oracle_bandwidth_with_profile(&profile, k.sup_norm, n, h_min)
}

/// Same scan against an injected maximal-error profile; the closed-form
/// test route.
pub fn oracle_bandwidth_with_profile<P: Fn(f64) -> f64>(
    profile: &P,
    kernel_sup: f64,
    n: u64,
    h_min: f64,
) -> Result<OracleReport> {
    if n < 3 {
        return Err(Error::invalid("oracle bandwidth needs n >= 3"));
    }
    if !(h_min > 0.0 && h_min < 1.0) {
        return Err(Error::invalid("h_min must lie in (0, 1)"));
    }
    let target = kernel_sup * (n as f64).ln().sqrt();
    let crit = |h: f64| (n as f64 * h).sqrt() * profile(h);

    let at_one = crit(1.0);
    if at_one <= target {
        return Ok(OracleReport {
            h_star: 1.0,
            delta_star_at_h_star: at_one / (n as f64).sqrt(),
            criterion_slack: at_one - target,
            at_lower_flag: false,
        });
    }
    let at_min = crit(h_min);
    if at_min > target {
        return Ok(OracleReport {
            h_star: h_min,
            delta_star_at_h_star: at_min / (n as f64 * h_min).sqrt(),
            criterion_slack: at_min - target,
            at_lower_flag: true,
        });
    }
    let mut lo = h_min;
    let mut hi = 1.0;
    while hi - lo > 1e-4 * lo {
        let mid = 0.5 * (lo + hi);
        if crit(mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let at_lo = crit(lo);
    Ok(OracleReport {
        h_star: lo,
        delta_star_at_h_star: at_lo / (n as f64 * lo).sqrt(),
        criterion_slack: at_lo - target,
        at_lower_flag: false,
    })
}

/// Mean of the estimator kernel against the true regression surface:
/// `det(E) \int K(E(x - t)) f(x . theta_star) dx`, with `E` the single
/// matrix for `theta` or the pair matrix for `(theta, pair_with)`.
/// Substituting `y = E(x - t)` turns this into a smooth integral over the
/// kernel square, evaluated by nested adaptive quadrature to 1e-9.
pub fn bias_functional(
    link: &LinkFunction,
    theta_star: &Direction,
    theta: &Direction,
    pair_with: Option<&Direction>,
    k: &Kernel1D,
    h: f64,
    t: [f64; 2],
) -> Result<f64> {
    let e: Matrix2 = match pair_with {
        None => single_matrix(theta, h)?,
        Some(nu) => pair_matrix(theta, nu, h)?,
    };
    let inv = e.inverse();
    let c = t[0] * theta_star.x() + t[1] * theta_star.y();
    let a1 = inv.a11 * theta_star.x() + inv.a21 * theta_star.y();
    let a2 = inv.a12 * theta_star.x() + inv.a22 * theta_star.y();
    let breaks = k.breakpoints();

    if a2 == 0.0 {
        let f1 = |y1: f64| k.eval(y1) * link.value(c + a1 * y1);
        return Ok(adaptive_simpson_with_breaks(&f1, -0.5, 0.5, &breaks, 1e-9));
    }
    let outer = |y1: f64| {
        let ky1 = k.eval(y1);
        if ky1 == 0.0 {
            return 0.0;
        }
        let base = c + a1 * y1;
        let inner = |y2: f64| k.eval(y2) * link.value(base + a2 * y2);
        ky1 * adaptive_simpson_with_breaks(&inner, -0.5, 0.5, &breaks, 2.5e-10)
    };
    Ok(adaptive_simpson_with_breaks(
        &outer, -0.5, 0.5, &breaks, 5e-10,
    ))
}

/// Monte Carlo risk of the oracle estimator (the one evaluated at the true
/// direction and the oracle bandwidth): the empirical
/// `(E |F_hat(t) - F(t)|^r)^{1/r}` over independent replications.
#[allow(clippy::too_many_arguments)]
pub fn oracle_point_risk(
    link: &LinkFunction,
    theta_star: &Direction,
    k: &Kernel1D,
    n: u64,
    t: [f64; 2],
    noise: &crate::harness::NoiseSpec,
    design: &crate::harness::DesignSpec,
    r: f64,
    reps: u64,
    seed: u64,
) -> Result<f64> {
    if reps < 50 {
        return Err(Error::invalid("oracle risk needs at least 50 replications"));
    }
    let envelope = noise.envelope()?;
    let (h_min, _) = crate::constants::bandwidth_scales(n, envelope.omega)?;
    let y = t[0] * theta_star.x() + t[1] * theta_star.y();
    let report = oracle_bandwidth(link, k, n, y, h_min)?;
    let h_star = report.h_star;
    let density = design.density()?;
    let f_true = link.value(y);

    let errs: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<f64> {
            let xs = design.sample(n as usize, seed, n, rep);
            let eps = noise.sample(n as usize, seed, n, rep)?;
            let ys: Vec<f64> = xs
                .iter()
                .zip(&eps)
                .map(|(x, e)| link.value(x[0] * theta_star.x() + x[1] * theta_star.y()) + e)
                .collect();
            let sample = Sample::new(xs, ys)?;
            let est = KernelEstimator::new(&sample, &density, k);
            let v = est.single(theta_star, h_star, t)?;
            Ok((v - f_true).abs().powf(r))
        })
        .collect::<Result<_>>()?;
    Ok((errs.iter().sum::<f64>() / reps as f64).powf(1.0 / r))
}
