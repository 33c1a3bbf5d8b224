//! Simulation harness: reproducible synthetic data, Monte Carlo risk
//! estimation, rate fitting, and the threshold calibration experiment.
//!
//! Reproducibility contract: every random stream is keyed by
//! `(base_seed, n, replication, stream tag)` through a splittable
//! counter-style derivation, so replications are independent, order
//! insensitive, and safe to run concurrently; aggregation is by
//! replication index.

use crate::constants::{derive_constants, threshold, Mode, NoiseEnvelope, ProcedureParams};
use crate::error::{Error, Result};
use crate::estimators::{DesignDensity, KernelEstimator, Sample};
use crate::geometry::Direction;
use crate::kernels::KernelSpec;
use crate::oracle::LinkFunction;
use crate::selection::{PointCache, SelectionContext};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const STREAM_DESIGN: u64 = 1;
pub const STREAM_NOISE: u64 = 2;
pub const STREAM_AUX: u64 = 3;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream for `(base_seed, n, rep, tag)`.
pub fn derive_rng(base_seed: u64, n: u64, rep: u64, tag: u64) -> ChaCha8Rng {
    let mut acc = mix(base_seed ^ 0x243F_6A88_85A3_08D3);
    for v in [n, rep, tag] {
        acc = mix(acc ^ mix(v.wrapping_add(0x4528_21E6_38D0_1377)));
    }
    let mut seed = [0u8; 32];
    let mut s = acc;
    for chunk in seed.chunks_mut(8) {
        s = mix(s.wrapping_add(0x9E37_79B9_7F4A_7C15));
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Noise presets, each carrying its sub-Weibull tail envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    Gaussian { sigma: f64 },
    Laplace { b: f64 },
    SymWeibull { omega: f64, scale: f64 },
}

impl NoiseSpec {
    /// Tail envelope `(upsilon, omega_cap, omega)` of the preset. The
    /// decay constant is capped at 1 to stay inside the admissible
    /// envelope family; lowering it only weakens the bound, so the
    /// envelope stays valid.
    pub fn envelope(&self) -> Result<NoiseEnvelope> {
        match *self {
            NoiseSpec::Gaussian { sigma } => {
                if !(sigma >= 0.0) {
                    return Err(Error::invalid("gaussian sigma must be nonnegative"));
                }
                let omega_cap = if sigma == 0.0 {
                    1.0
                } else {
                    (1.0 / (2.0 * sigma * sigma)).min(1.0)
                };
                NoiseEnvelope::new(0.5, omega_cap, 2.0)
            }
            NoiseSpec::Laplace { b } => {
                if !(b > 0.0) {
                    return Err(Error::invalid("laplace scale must be positive"));
                }
                NoiseEnvelope::new(0.5, (1.0 / b).min(1.0), 1.0)
            }
            NoiseSpec::SymWeibull { omega, scale } => {
                if !(omega > 0.0 && scale > 0.0) {
                    return Err(Error::invalid("weibull shape and scale must be positive"));
                }
                NoiseEnvelope::new(0.5, scale.powf(-omega).min(1.0), omega)
            }
        }
    }

    /// The noise density, used by the envelope verification tests.
    pub fn density(&self, x: f64) -> f64 {
        match *self {
            NoiseSpec::Gaussian { sigma } => {
                if sigma == 0.0 {
                    return if x == 0.0 { f64::INFINITY } else { 0.0 };
                }
                (-0.5 * x * x / (sigma * sigma)).exp()
                    / (sigma * (2.0 * std::f64::consts::PI).sqrt())
            }
            NoiseSpec::Laplace { b } => (-x.abs() / b).exp() / (2.0 * b),
            NoiseSpec::SymWeibull { omega, scale } => {
                let a = x.abs() / scale;
                if a == 0.0 && omega < 1.0 {
                    return f64::INFINITY;
                }
                0.5 * (omega / scale) * a.powf(omega - 1.0) * (-a.powf(omega)).exp()
            }
        }
    }

    /// Exact upper-tail probability of the preset.
    pub fn tail(&self, x: f64) -> f64 {
        match *self {
            NoiseSpec::Gaussian { sigma } => {
                if sigma == 0.0 {
                    return 0.0;
                }
                // numeric integration of the density; cheap and exactly
                // the quantity the envelope bounds
                let f = |u: f64| self.density(u);
                crate::numeric::adaptive_simpson(&f, x, x + 12.0 * sigma, 1e-13)
            }
            NoiseSpec::Laplace { b } => 0.5 * (-x / b).exp(),
            NoiseSpec::SymWeibull { omega, scale } => 0.5 * (-(x / scale).powf(omega)).exp(),
        }
    }

    /// Draw `count` values for replication `(base_seed, n, rep)`.
    pub fn sample(&self, count: usize, base_seed: u64, n: u64, rep: u64) -> Result<Vec<f64>> {
        let mut rng = derive_rng(base_seed, n, rep, STREAM_NOISE);
        match *self {
            NoiseSpec::Gaussian { sigma } => {
                if sigma == 0.0 {
                    return Ok(vec![0.0; count]);
                }
                let dist = Normal::new(0.0, sigma)
                    .map_err(|e| Error::invalid(format!("bad gaussian parameters: {e}")))?;
                Ok((0..count).map(|_| dist.sample(&mut rng)).collect())
            }
            NoiseSpec::Laplace { b } => Ok((0..count)
                .map(|_| {
                    let u: f64 = rng.random();
                    let mag = -b * (1.0 - u).ln();
                    if rng.random::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect()),
            NoiseSpec::SymWeibull { omega, scale } => Ok((0..count)
                .map(|_| {
                    let u: f64 = rng.random();
                    let mag = scale * (-(1.0 - u).ln()).powf(1.0 / omega);
                    if rng.random::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect()),
        }
    }
}

/// Design presets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignSpec {
    Uniform,
    TruncatedGaussian { sigma: f64 },
}

impl DesignSpec {
    pub fn density(&self) -> Result<DesignDensity> {
        match *self {
            DesignSpec::Uniform => Ok(DesignDensity::uniform()),
            DesignSpec::TruncatedGaussian { sigma } => DesignDensity::truncated_gaussian(sigma),
        }
    }

    pub fn sample(&self, count: usize, base_seed: u64, n: u64, rep: u64) -> Vec<[f64; 2]> {
        self.sample_stream(count, base_seed, n, rep, STREAM_DESIGN)
    }

    pub fn sample_stream(
        &self,
        count: usize,
        base_seed: u64,
        n: u64,
        rep: u64,
        tag: u64,
    ) -> Vec<[f64; 2]> {
        let mut rng = derive_rng(base_seed, n, rep, tag);
        match *self {
            DesignSpec::Uniform => (0..count)
                .map(|_| {
                    [
                        rng.random::<f64>() * 6.0 - 3.0,
                        rng.random::<f64>() * 6.0 - 3.0,
                    ]
                })
                .collect(),
            DesignSpec::TruncatedGaussian { sigma } => {
                let dist = Normal::new(0.0, sigma).expect("validated sigma");
                (0..count)
                    .map(|_| loop {
                        let x = dist.sample(&mut rng);
                        let y = dist.sample(&mut rng);
                        if (-3.0..=3.0).contains(&x) && (-3.0..=3.0).contains(&y) {
                            break [x, y];
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Link presets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinkSpec {
    Constant { value: f64 },
    Linear { slope: f64 },
    SqrtAbs,
    Bump { beta: f64, l: f64, scale: f64 },
}

impl LinkSpec {
    pub fn build(&self) -> Result<LinkFunction> {
        match *self {
            LinkSpec::Constant { value } => Ok(LinkFunction::constant(value)),
            LinkSpec::Linear { slope } => Ok(LinkFunction::linear(slope)),
            LinkSpec::SqrtAbs => Ok(LinkFunction::sqrt_abs()),
            LinkSpec::Bump { beta, l, scale } => bump_link(beta, l, scale),
        }
    }
}

/// Raw bump `exp(-1/(1-(2z)^2))` on `(-1/2, 1/2)` with its first three
/// derivatives; all underflow to exact zero near the support edge.
fn raw_bump(z: f64) -> [f64; 4] {
    let q = 1.0 - 4.0 * z * z;
    if q <= 0.0 {
        return [0.0; 4];
    }
    let w = (-1.0 / q).exp();
    if w == 0.0 {
        return [0.0; 4];
    }
    let q2 = q * q;
    let q3 = q2 * q;
    let q4 = q2 * q2;
    let p1 = -8.0 * z / q2;
    let p2 = -8.0 / q2 - 128.0 * z * z / q3;
    let p3 = -384.0 * z / q3 - 3072.0 * z * z * z / q4;
    [
        w,
        w * p1,
        w * (p2 + p1 * p1),
        w * (p3 + 3.0 * p2 * p1 + p1 * p1 * p1),
    ]
}

/// Smoothness seminorm proxy of the raw bump for order `beta`, measured
/// on a dense grid: the max of the relevant derivative sups and the
/// Hoelder ratio of the top derivative. For integer orders that ratio is
/// the sup of the next derivative.
fn bump_seminorm_proxy(beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta <= 3.0) {
        return Err(Error::invalid("bump links support beta in (0, 3]"));
    }
    let m_beta = if beta <= 1.0 {
        0usize
    } else if beta <= 2.0 {
        1
    } else {
        2
    };
    const POINTS: usize = 10_000;
    let grid: Vec<[f64; 4]> = (0..=POINTS)
        .map(|i| raw_bump(-0.5 + i as f64 / POINTS as f64))
        .collect();
    let mut proxy = 0.0f64;
    for m in 0..=m_beta {
        for v in &grid {
            proxy = proxy.max(v[m].abs());
        }
    }
    let holder = beta - m_beta as f64;
    if holder == 1.0 {
        // Lipschitz seminorm of the top derivative: sup of the next one
        for v in &grid {
            proxy = proxy.max(v[m_beta + 1].abs());
        }
    } else {
        let step = 1.0 / POINTS as f64;
        for gap in 1..=16usize {
            let dz = gap as f64 * step;
            let denom = dz.powf(holder);
            for i in 0..=(POINTS - gap) {
                let diff = (grid[i + gap][m_beta] - grid[i][m_beta]).abs();
                proxy = proxy.max(diff / denom);
            }
        }
    }
    Ok(proxy)
}

/// A compactly supported link `L * scale^beta * w(z / scale)`, with `w`
/// the smooth bump normalized so that its order-`beta` seminorm proxy is
/// one. The support is `(-scale/2, scale/2)`.
pub fn bump_link(beta: f64, l: f64, scale: f64) -> Result<LinkFunction> {
    if !(l > 0.0 && scale > 0.0) {
        return Err(Error::invalid("bump link needs positive L and scale"));
    }
    let proxy = bump_seminorm_proxy(beta)?;
    let amp = l * scale.powf(beta) / proxy;
    let inv_scale = 1.0 / scale;
    let beta0 = if beta < 1.0 { beta } else { 0.99 };
    // envelope constants of the normalized link, crude but valid:
    // sup |f| <= amp * e^{-1}, Hoelder-beta0 ratio <= Lipschitz-based bound
    let sup = amp * (-1.0f64).exp();
    let lip = amp * inv_scale / proxy.max(1.0);
    let m_env = sup + lip.max(sup * 2.0);
    Ok(LinkFunction::from_fn(
        format!("bump(beta={beta},L={l},scale={scale})"),
        (beta, l, beta0, m_env),
        move |z| amp * raw_bump(z * inv_scale)[0],
    ))
}

/// Hypothesis directions `(cos(j/N), sin(j/N))`, `j = 1..=N`: the
/// adversarial direction family used as test fixtures.
pub fn direction_family(n: usize) -> Vec<Direction> {
    (1..=n)
        .map(|j| Direction::from_angle(j as f64 / n as f64))
        .collect()
}

/// Which risk the experiment measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RiskKind {
    #[default]
    Pointwise,
    Global,
}

/// Full experiment description; this is the unit the CLI serializes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub kernel: KernelSpec,
    pub noise: NoiseSpec,
    #[serde(default = "default_design")]
    pub design: DesignSpec,
    #[serde(default = "default_link")]
    pub link: LinkSpec,
    /// Index vector, not necessarily unit length; it is normalized
    /// internally and the link is rescaled to compensate.
    #[serde(default = "default_theta_star")]
    pub theta_star: [f64; 2],
    #[serde(default = "default_risk_order")]
    pub risk_order: f64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_n_theta")]
    pub n_theta: usize,
    #[serde(default)]
    pub n_values: Vec<u64>,
    #[serde(default = "default_reps")]
    pub reps: u64,
    #[serde(default)]
    pub base_seed: u64,
    /// Override for the design-density lower bound; defaults to the
    /// preset's certified bound.
    #[serde(default)]
    pub g_lower: Option<f64>,
    #[serde(default)]
    pub risk: RiskKind,
    /// Target point for pointwise risk.
    #[serde(default)]
    pub t: [f64; 2],
}

fn default_design() -> DesignSpec {
    DesignSpec::Uniform
}

fn default_link() -> LinkSpec {
    LinkSpec::Constant { value: 0.0 }
}

fn default_theta_star() -> [f64; 2] {
    [1.0, 0.0]
}

fn default_risk_order() -> f64 {
    2.0
}

fn default_n_theta() -> usize {
    64
}

fn default_reps() -> u64 {
    100
}

impl ExperimentConfig {
    /// Checks needed by any command that runs the selection rule.
    pub fn validate_procedure(&self) -> Result<()> {
        if self.n_theta < 4 || !self.n_theta.is_multiple_of(2) {
            return Err(Error::invalid("n_theta must be even and >= 4"));
        }
        self.noise.envelope()?;
        self.procedure_params()?.validate()?;
        Ok(())
    }

    /// Full validation for simulation experiments.
    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() {
            return Err(Error::invalid("n_values must not be empty"));
        }
        if self.n_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("n_values must be strictly ascending"));
        }
        if self.reps < 1 {
            return Err(Error::invalid("reps must be at least 1"));
        }
        if self.theta_star == [0.0, 0.0] {
            return Err(Error::invalid("theta_star must be nonzero"));
        }
        self.validate_procedure()
    }

    pub fn procedure_params(&self) -> Result<ProcedureParams> {
        let kernel = self.kernel.build()?;
        let g_lower = match self.g_lower {
            Some(v) => v,
            None => self.design.density()?.g_lower_on_core,
        };
        Ok(ProcedureParams {
            r: self.risk_order,
            g_lower,
            kernel_sup: kernel.sup_norm,
            kernel_l1: kernel.l1_norm,
            lipschitz_q: kernel.lipschitz_q,
            mode: self.mode,
        })
    }

    /// The normalized index direction together with the matching link
    /// rescaling: the estimation problem for a raw index vector is the
    /// problem for its unit version with the link dilated by its norm.
    pub fn effective_direction(&self) -> Result<(Direction, LinkFunction)> {
        let norm = (self.theta_star[0].powi(2) + self.theta_star[1].powi(2)).sqrt();
        let dir = Direction::unit(self.theta_star[0], self.theta_star[1])?;
        Ok((dir, self.link.build()?.rescaled(norm)))
    }

    /// True regression value at `x`.
    pub fn regression(&self, link: &LinkFunction, x: [f64; 2]) -> f64 {
        link.value(x[0] * self.theta_star[0] + x[1] * self.theta_star[1])
    }
}

/// Synthesize replication `rep` at sample size `n`.
pub fn gen_sample(cfg: &ExperimentConfig, n: u64, rep: u64) -> Result<Sample> {
    let link = cfg.link.build()?;
    let xs = cfg.design.sample(n as usize, cfg.base_seed, n, rep);
    let eps = cfg.noise.sample(n as usize, cfg.base_seed, n, rep)?;
    let ys: Vec<f64> = xs
        .iter()
        .zip(&eps)
        .map(|(x, e)| cfg.regression(&link, *x) + e)
        .collect();
    Sample::new(xs, ys)
}

/// One row of a risk report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskRow {
    pub n: u64,
    pub risk: f64,
    pub std_error: f64,
    pub mean_h_hat: f64,
    pub mean_angle_err: f64,
}

fn angle_error(theta_hat: &Direction, theta_star: &Direction) -> f64 {
    theta_hat.dot(theta_star).abs().clamp(0.0, 1.0).acos()
}

/// 33 x 33 evaluation grid on the unit square, for global risk.
pub fn global_risk_grid() -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(33 * 33);
    for i in 0..33 {
        for j in 0..33 {
            pts.push([
                -0.5 + (i as f64 + 0.5) / 33.0,
                -0.5 + (j as f64 + 0.5) / 33.0,
            ]);
        }
    }
    pts
}

/// Monte Carlo risk at sample size `n` under the configured mode.
pub fn mc_risk(cfg: &ExperimentConfig, n: u64) -> Result<RiskRow> {
    cfg.validate()?;
    let kernel = cfg.kernel.build()?;
    let density = cfg.design.density()?;
    let params = cfg.procedure_params()?;
    let envelope = cfg.noise.envelope()?;
    let dc = derive_constants(n, &envelope, &params)?;
    let link = cfg.link.build()?;
    let (theta_dir, _) = cfg.effective_direction()?;
    let r = cfg.risk_order;
    let grid = match cfg.risk {
        RiskKind::Pointwise => vec![cfg.t],
        RiskKind::Global => global_risk_grid(),
    };

    struct RepOutcome {
        err_pow: f64,
        h_sum: f64,
        ang_sum: f64,
    }

    let outcomes: Vec<RepOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| -> Result<RepOutcome> {
            let sample = gen_sample(cfg, n, rep)?;
            let ctx = SelectionContext::new(&sample, &density, &kernel, dc, cfg.n_theta)?;
            let mut err_acc = 0.0;
            let mut h_sum = 0.0;
            let mut ang_sum = 0.0;
            for &t in &grid {
                let res = ctx.select(t)?;
                let truth = cfg.regression(&link, t);
                err_acc += (res.estimate - truth).abs().powf(r);
                h_sum += res.h_hat;
                ang_sum += angle_error(&res.theta_hat, &theta_dir);
            }
            let m = grid.len() as f64;
            let err_pow = match cfg.risk {
                // pointwise keeps |err|^r; global keeps the L_r norm of
                // the grid (rectangle rule over the unit square)
                RiskKind::Pointwise => err_acc,
                RiskKind::Global => (err_acc / m).powf(1.0 / r),
            };
            Ok(RepOutcome {
                err_pow,
                h_sum: h_sum / m,
                ang_sum: ang_sum / m,
            })
        })
        .collect::<Result<_>>()?;

    let reps = cfg.reps as f64;
    let mean_h_hat = outcomes.iter().map(|o| o.h_sum).sum::<f64>() / reps;
    let mean_angle_err = outcomes.iter().map(|o| o.ang_sum).sum::<f64>() / reps;

    let (risk, std_error) = match cfg.risk {
        RiskKind::Pointwise => {
            let pows: Vec<f64> = outcomes.iter().map(|o| o.err_pow).collect();
            let total: f64 = pows.iter().sum();
            let risk = (total / reps).powf(1.0 / r);
            // jackknife over replications
            let loo: Vec<f64> = pows
                .iter()
                .map(|e| ((total - e) / (reps - 1.0)).powf(1.0 / r))
                .collect();
            let loo_mean = loo.iter().sum::<f64>() / reps;
            let se = ((reps - 1.0) / reps
                * loo
                    .iter()
                    .map(|v| (v - loo_mean) * (v - loo_mean))
                    .sum::<f64>())
            .sqrt();
            (risk, se)
        }
        RiskKind::Global => {
            let norms: Vec<f64> = outcomes.iter().map(|o| o.err_pow).collect();
            let mean = norms.iter().sum::<f64>() / reps;
            let var =
                norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1.0).max(1.0);
            (mean, (var / reps).sqrt())
        }
    };

    Ok(RiskRow {
        n,
        risk,
        std_error,
        mean_h_hat,
        mean_angle_err,
    })
}

/// Run the experiment across all configured sample sizes.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RiskRow>> {
    cfg.n_values.iter().map(|&n| mc_risk(cfg, n)).collect()
}

/// Least squares of `ln(risk)` on `ln(ln n / n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub std_err: f64,
}

pub fn rate_fit(rows: &[RiskRow]) -> Result<RateFit> {
    if rows.len() < 3 {
        return Err(Error::invalid("rate fitting needs at least 3 sample sizes"));
    }
    if rows.iter().any(|r| !(r.risk > 0.0)) {
        return Err(Error::invalid("rate fitting needs positive risks"));
    }
    let xs: Vec<f64> = rows
        .iter()
        .map(|r| ((r.n as f64).ln() / r.n as f64).ln())
        .collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.risk.ln()).collect();
    let m = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / m;
    let ym = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let ssr: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let dof = (m - 2.0).max(1.0);
    let std_err = (ssr / dof / sxx).sqrt();
    Ok(RateFit {
        slope,
        intercept,
        std_err,
    })
}

/// Calibration outcome: the chosen level and the full sweep table of
/// `(kappa, fraction of null replications selecting h_hat < 1)`.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub kappa: Option<f64>,
    pub table: Vec<(f64, f64)>,
    pub n: u64,
    pub reps: u64,
}

/// Dyadic sweep `kappa in {2^-4 .. 2^6}` against the null experiment
/// (zero link plus the configured noise): the chosen level is the
/// smallest one for which at most 5% of null replications select a
/// bandwidth below 1. The per-replication statistics do not depend on
/// `kappa`, so each replication is simulated once and re-decided per
/// level.
pub fn calibrate(cfg: &ExperimentConfig) -> Result<CalibrationReport> {
    cfg.validate()?;
    let n = *cfg.n_values.last().expect("validated nonempty");
    let kernel = cfg.kernel.build()?;
    let density = cfg.design.density()?;
    let envelope = cfg.noise.envelope()?;
    let base_params = cfg.procedure_params()?;
    let null_cfg = ExperimentConfig {
        link: LinkSpec::Constant { value: 0.0 },
        ..cfg.clone()
    };

    // statistics that are invariant across kappa
    struct NullStats {
        grid_max: f64,
        cache: PointCache,
    }
    let shape_dc = derive_constants(
        n,
        &envelope,
        &ProcedureParams {
            mode: Mode::Calibrated { kappa: 1.0 },
            ..base_params
        },
    )?;
    let (h_grid, dir_grid) = crate::selection::build_grids(cfg.n_theta, &shape_dc)?;

    let stats: Vec<NullStats> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| -> Result<NullStats> {
            let sample = gen_sample(&null_cfg, n, rep)?;
            let est = KernelEstimator::new(&sample, &density, &kernel);
            let grid_max = est.preliminary_grid_max_step(shape_dc.frak_h, shape_dc.frak_h / 4.0)?;
            let cache = PointCache::compute(&est, &dir_grid, &h_grid, cfg.t)?;
            Ok(NullStats { grid_max, cache })
        })
        .collect::<Result<_>>()?;

    let kappas: Vec<f64> = (-4..=6).map(|e| 2f64.powi(e)).collect();
    let mut table = Vec::with_capacity(kappas.len());
    let mut chosen = None;
    for &kappa in &kappas {
        let dc = derive_constants(
            n,
            &envelope,
            &ProcedureParams {
                mode: Mode::Calibrated { kappa },
                ..base_params
            },
        )?;
        let th: Vec<f64> = h_grid
            .values()
            .iter()
            .map(|&h| {
                let f_inf_free = threshold(h, n, 0.0, &dc, kernel.sup_norm)?;
                Ok(f_inf_free)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut below = 0u64;
        for s in &stats {
            let f_inf = 2.0 * s.grid_max + 2.0 * dc.cap_c5;
            // rebuild the per-scale thresholds with this replication's
            // preliminary statistic
            let th_rep: Vec<f64> = th
                .iter()
                .zip(h_grid.values())
                .map(|(_, &h)| threshold(h, n, f_inf, &dc, kernel.sup_norm))
                .collect::<Result<Vec<f64>>>()?;
            let res = s.cache.decide(&th_rep, &dir_grid, &h_grid);
            if res.h_hat < 1.0 {
                below += 1;
            }
        }
        let frac = below as f64 / cfg.reps as f64;
        table.push((kappa, frac));
        if chosen.is_none() && frac <= 0.05 {
            chosen = Some(kappa);
        }
    }
    Ok(CalibrationReport {
        kappa: chosen,
        table,
        n,
        reps: cfg.reps,
    })
}

/// Worker pool sized from an explicit request capped by `SIREN_THREADS`.
pub fn build_pool(requested: Option<usize>) -> Result<rayon::ThreadPool> {
    let env_cap = std::env::var("SIREN_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&v| v > 0);
    let threads = match (requested, env_cap) {
        (Some(r), Some(e)) => r.min(e),
        (Some(r), None) => r,
        (None, Some(e)) => e,
        (None, None) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg() -> ExperimentConfig {
        ExperimentConfig {
            kernel: KernelSpec::Triangular,
            noise: NoiseSpec::Gaussian { sigma: 0.5 },
            design: DesignSpec::Uniform,
            link: LinkSpec::Bump {
                beta: 1.0,
                l: 1.0,
                scale: 1.0,
            },
            theta_star: [1.0f64.cos(), 1.0f64.sin()],
            risk_order: 2.0,
            mode: Mode::Calibrated { kappa: 0.5 },
            n_theta: 8,
            n_values: vec![256, 512],
            reps: 4,
            base_seed: 7,
            g_lower: None,
            risk: RiskKind::Pointwise,
            t: [0.0, 0.0],
        }
    }

    #[test]
    fn sample_generation_is_deterministic() {
        let cfg = base_cfg();
        let a = gen_sample(&cfg, 256, 3).unwrap();
        let b = gen_sample(&cfg, 256, 3).unwrap();
        for i in 0..a.n() {
            assert_eq!(a.xs()[i][0].to_bits(), b.xs()[i][0].to_bits());
            assert_eq!(a.ys()[i].to_bits(), b.ys()[i].to_bits());
        }
        let c = gen_sample(&cfg, 256, 4).unwrap();
        assert!(a.ys()[0] != c.ys()[0]);
    }

    #[test]
    fn zero_noise_gives_exact_regression() {
        let mut cfg = base_cfg();
        cfg.noise = NoiseSpec::Gaussian { sigma: 0.0 };
        let link = cfg.link.build().unwrap();
        let s = gen_sample(&cfg, 128, 0).unwrap();
        for (x, &y) in s.xs().iter().zip(s.ys()) {
            assert_eq!(y, cfg.regression(&link, *x));
        }
    }

    #[test]
    fn raw_index_vector_matches_normalized_problem() {
        let mut cfg_raw = base_cfg();
        cfg_raw.theta_star = [2.0, 0.0];
        let (dir, eff_link) = cfg_raw.effective_direction().unwrap();
        assert_eq!(dir.x(), 1.0);
        assert_eq!(dir.y(), 0.0);
        let raw_link = cfg_raw.link.build().unwrap();
        for z in [-0.4, -0.1, 0.0, 0.2, 0.45] {
            // f_eff(x . unit) == f(x . raw) for x = (z, anything)
            assert_eq!(eff_link.value(z), raw_link.value(2.0 * z));
        }
    }

    #[test]
    fn bump_link_shape() {
        let beta = 1.0;
        let l = 1.0;
        let scale = 0.5;
        let f = bump_link(beta, l, scale).unwrap();
        // support inside (-scale/2, scale/2)
        assert_eq!(f.value(0.25), 0.0);
        assert_eq!(f.value(-0.26), 0.0);
        assert!(f.value(0.0) > 0.0);
        // peak value L * scale^beta * w(0)
        let proxy = bump_seminorm_proxy(beta).unwrap();
        let expect = l * scale.powf(beta) * (-1.0f64).exp() / proxy;
        assert!((f.value(0.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn bump_normalization_controls_derivative_grid() {
        // after normalization, max |w'| over the grid is at most 1 for
        // beta = 1 (the proxy includes it)
        let proxy = bump_seminorm_proxy(1.0).unwrap();
        const POINTS: usize = 10_000;
        let mut max_d1: f64 = 0.0;
        for i in 0..=POINTS {
            let z = -0.5 + i as f64 / POINTS as f64;
            max_d1 = max_d1.max(raw_bump(z)[1].abs() / proxy);
        }
        assert!(max_d1 <= 1.0 + 1e-12, "{max_d1}");
    }

    #[test]
    fn direction_family_fixture() {
        let fam = direction_family(4);
        assert_eq!(fam.len(), 4);
        assert!((fam[0].x() - 0.25f64.cos()).abs() < 1e-15);
        assert!((fam[0].y() - 0.25f64.sin()).abs() < 1e-15);
        for d in &fam {
            assert!((d.x() * d.x() + d.y() * d.y() - 1.0).abs() < 1e-12);
        }
        // adjacent angular gap 1/N
        let gap = fam[1].angle() - fam[0].angle();
        assert!((gap - 0.25).abs() < 1e-12);
    }

    #[test]
    fn noise_presets_satisfy_their_envelopes() {
        let presets = [
            NoiseSpec::Gaussian { sigma: 0.5 },
            NoiseSpec::Gaussian { sigma: 2.0 },
            NoiseSpec::Laplace { b: 1.0 },
            NoiseSpec::SymWeibull {
                omega: 1.5,
                scale: 1.0,
            },
        ];
        for preset in presets {
            let env = preset.envelope().unwrap();
            for i in 0..=40 {
                let x = 10.0 * i as f64 / 40.0;
                let tail = preset.tail(x);
                let bound = env.upsilon * (-env.omega_cap * x.powf(env.omega)).exp();
                assert!(
                    tail <= bound + 1e-12,
                    "{preset:?} at x={x}: tail {tail} > bound {bound}"
                );
            }
        }
    }

    #[test]
    fn noise_sampling_matches_declared_tails_roughly() {
        // quick sanity: the empirical mean of |eps| for laplace(b) is b
        let spec = NoiseSpec::Laplace { b: 0.7 };
        let xs = spec.sample(200_000, 5, 100, 0).unwrap();
        let mean_abs = xs.iter().map(|v| v.abs()).sum::<f64>() / xs.len() as f64;
        assert!((mean_abs - 0.7).abs() < 0.01, "{mean_abs}");
    }

    #[test]
    fn design_presets_cover_their_bounds() {
        for spec in [
            DesignSpec::Uniform,
            DesignSpec::TruncatedGaussian { sigma: 2.0 },
        ] {
            let d = spec.density().unwrap();
            let pts = spec.sample(2000, 3, 50, 0);
            assert_eq!(pts.len(), 2000);
            for p in pts {
                assert!((-3.0..=3.0).contains(&p[0]) && (-3.0..=3.0).contains(&p[1]));
                assert!(d.value(p[0], p[1]) >= d.g_lower_on_core - 1e-15);
            }
        }
    }

    #[test]
    fn mc_risk_zero_signal_zero_noise() {
        let mut cfg = base_cfg();
        cfg.noise = NoiseSpec::Gaussian { sigma: 0.0 };
        cfg.link = LinkSpec::Constant { value: 0.0 };
        cfg.reps = 3;
        let row = mc_risk(&cfg, 256).unwrap();
        assert_eq!(row.risk, 0.0);
        assert_eq!(row.mean_h_hat, 1.0);
    }

    #[test]
    fn global_risk_mode_runs_and_reproduces() {
        let mut cfg = base_cfg();
        cfg.risk = RiskKind::Global;
        cfg.n_theta = 4;
        cfg.reps = 2;
        let a = mc_risk(&cfg, 128).unwrap();
        assert!(a.risk > 0.0 && a.risk.is_finite());
        assert!(a.std_error >= 0.0);
        let b = mc_risk(&cfg, 128).unwrap();
        assert_eq!(a.risk.to_bits(), b.risk.to_bits());

        // zero link and zero noise leaves nothing: the grid norm is 0
        cfg.link = LinkSpec::Constant { value: 0.0 };
        cfg.noise = NoiseSpec::Gaussian { sigma: 0.0 };
        let z = mc_risk(&cfg, 128).unwrap();
        assert_eq!(z.risk, 0.0);
    }

    #[test]
    fn risk_orders_are_power_mean_ordered() {
        let mut cfg = base_cfg();
        cfg.reps = 8;
        let r1 = {
            let mut c = cfg.clone();
            c.risk_order = 1.0;
            mc_risk(&c, 256).unwrap().risk
        };
        let r2 = {
            let mut c = cfg.clone();
            c.risk_order = 2.0;
            mc_risk(&c, 256).unwrap().risk
        };
        assert!(r2 >= r1 - 1e-12, "r2 {r2} < r1 {r1}");
    }

    #[test]
    fn std_error_shrinks_with_reps() {
        let mut cfg = base_cfg();
        cfg.reps = 16;
        let se_small = mc_risk(&cfg, 256).unwrap().std_error;
        cfg.reps = 64;
        let se_large = mc_risk(&cfg, 256).unwrap().std_error;
        // quadrupling reps should roughly halve the standard error
        assert!(
            se_large < se_small,
            "se did not shrink: {se_small} -> {se_large}"
        );
        let ratio = se_small / se_large;
        assert!(ratio > 1.2 && ratio < 3.6, "ratio {ratio}");
    }

    #[test]
    fn rate_fit_recovers_exact_exponents() {
        // feed exact pointwise-rate values: slope beta/(2 beta + 1)
        let beta = 1.0;
        let l = 1.3;
        let rows: Vec<RiskRow> = [1024u64, 2048, 4096, 8192]
            .iter()
            .map(|&n| {
                let q = crate::rates::RateQuery {
                    n,
                    beta,
                    l,
                    p: f64::INFINITY,
                    r: 2.0,
                };
                RiskRow {
                    n,
                    risk: crate::rates::pointwise_rate(&q).unwrap(),
                    std_error: 0.0,
                    mean_h_hat: 0.0,
                    mean_angle_err: 0.0,
                }
            })
            .collect();
        let fit = rate_fit(&rows).unwrap();
        assert!((fit.slope - beta / (2.0 * beta + 1.0)).abs() < 1e-6);

        // sparse-regime global formula is log-linear in the regressor too
        let rows: Vec<RiskRow> = [1024u64, 2048, 4096, 8192]
            .iter()
            .map(|&n| {
                let q = crate::rates::RateQuery {
                    n,
                    beta: 1.0,
                    l: 1.0,
                    p: 2.0,
                    r: 8.0,
                };
                RiskRow {
                    n,
                    risk: crate::rates::global_rate(&q).unwrap().upper,
                    std_error: 0.0,
                    mean_h_hat: 0.0,
                    mean_angle_err: 0.0,
                }
            })
            .collect();
        let fit = rate_fit(&rows).unwrap();
        let want = (1.0 - 0.5 + 0.125) / (2.0 - 1.0 + 1.0);
        assert!((fit.slope - want).abs() < 1e-6, "{} vs {want}", fit.slope);

        // constant risks give slope ~ 0
        let rows: Vec<RiskRow> = [1024u64, 2048, 4096]
            .iter()
            .map(|&n| RiskRow {
                n,
                risk: 0.37,
                std_error: 0.0,
                mean_h_hat: 0.0,
                mean_angle_err: 0.0,
            })
            .collect();
        let fit = rate_fit(&rows).unwrap();
        assert!(fit.slope.abs() < 1e-12);

        assert!(rate_fit(&rows[..2]).is_err());
    }

    #[test]
    fn calibration_zero_noise_returns_smallest_kappa() {
        let mut cfg = base_cfg();
        cfg.noise = NoiseSpec::Gaussian { sigma: 0.0 };
        cfg.n_values = vec![256];
        cfg.reps = 6;
        let report = calibrate(&cfg).unwrap();
        assert_eq!(report.kappa, Some(2f64.powi(-4)));
        // qualification is monotone in kappa
        for w in report.table.windows(2) {
            assert!(w[0].1 >= w[1].1 - 1e-12);
        }
    }

    #[test]
    fn calibration_with_noise_reports_table() {
        let mut cfg = base_cfg();
        cfg.n_values = vec![512];
        cfg.reps = 24;
        let report = calibrate(&cfg).unwrap();
        assert_eq!(report.table.len(), 11);
        assert!(report.kappa.is_some());
        for w in report.table.windows(2) {
            assert!(w[0].1 >= w[1].1 - 1e-12, "monotone sweep");
        }
    }

    #[test]
    fn experiment_is_reproducible_end_to_end() {
        let cfg = base_cfg();
        let a = mc_risk(&cfg, 256).unwrap();
        let b = mc_risk(&cfg, 256).unwrap();
        assert_eq!(a.risk.to_bits(), b.risk.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
        assert_eq!(a.mean_h_hat.to_bits(), b.mean_h_hat.to_bits());
    }

    #[test]
    fn config_validation_catches_misuse() {
        let mut cfg = base_cfg();
        cfg.n_values = vec![512, 256];
        assert!(cfg.validate().is_err());
        let mut cfg = base_cfg();
        cfg.theta_star = [0.0, 0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = base_cfg();
        cfg.n_theta = 7;
        assert!(cfg.validate().is_err());
    }
}
