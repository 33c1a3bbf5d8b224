//! Unknown-design-density extension: estimate the density on an
//! independent auxiliary sample with a product-kernel estimator,
//! truncate it away from zero, and adjust the selection threshold for
//! the extra approximation error.
//!
//! The changes relative to the known-density procedure:
//!
//! 1. inverse-density weights use the truncated estimate;
//! 2. the density lower bound inside every threshold constant is
//!    replaced by the data-driven `g_hat_min^2 / (8 g_hat_sup)`;
//! 3. the threshold gains the additive term
//!    `2 a_n g_hat_min^{-1} ||k||_1^2 F_hat_inf`.

use crate::constants::{
    derive_constants, threshold, DerivedConstants, NoiseEnvelope, ProcedureParams,
};
use crate::error::{Error, Result};
use crate::estimators::{BucketGrid, DesignDensity, Sample};
use crate::kernels::Kernel1D;
use std::sync::Arc;

/// A truncated kernel density estimate with the quantities the modified
/// threshold needs.
#[derive(Clone)]
pub struct DensityEstimate {
    eval: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    /// Infimum of the raw estimate over the core grid, floored at `b_n`.
    pub g_hat_min: f64,
    /// Supremum of the raw estimate over the core grid.
    pub g_hat_sup: f64,
    /// Truncation floor `b_n = ln^{-3}(n)`.
    pub b_n: f64,
    /// Accuracy scale `a_n = (ln n / n)^{gamma / (2 (gamma + 1))}`.
    pub a_n: f64,
    /// Kernel bandwidth used per axis.
    pub bandwidth: f64,
    /// Set when the core infimum hit the truncation floor; the estimate
    /// is then unreliable and downstream quantities inherit that.
    pub truncation_active: bool,
}

impl std::fmt::Debug for DensityEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DensityEstimate")
            .field("g_hat_min", &self.g_hat_min)
            .field("g_hat_sup", &self.g_hat_sup)
            .field("b_n", &self.b_n)
            .field("a_n", &self.a_n)
            .field("bandwidth", &self.bandwidth)
            .field("truncation_active", &self.truncation_active)
            .finish()
    }
}

impl DensityEstimate {
    /// Truncated value `max(g_hat(x), b_n)`.
    #[inline]
    pub fn value(&self, x1: f64, x2: f64) -> f64 {
        (self.eval)(x1, x2).max(self.b_n)
    }

    /// Raw (untruncated) estimate.
    #[inline]
    pub fn raw(&self, x1: f64, x2: f64) -> f64 {
        (self.eval)(x1, x2)
    }

    /// View as a design density for the estimators; the evaluator is the
    /// truncated one, so inverse weights stay bounded.
    pub fn as_design_density(&self) -> DesignDensity {
        let eval = self.eval.clone();
        let b_n = self.b_n;
        DesignDensity::from_fn(
            move |x1, x2| eval(x1, x2).max(b_n),
            self.g_hat_min,
            self.g_hat_sup.max(self.b_n),
        )
    }
}

/// Product-kernel density estimate on the auxiliary design points, with
/// per-axis bandwidth `(ln n / n)^{1 / (2 (gamma + 1))}` (the choice
/// whose sup-norm accuracy matches `a_n` for isotropic smoothness
/// `gamma`), truncated at `b_n = ln^{-3}(n)`. The kernel order should be
/// at least `ceil(gamma) - 1`. Only the design points of the auxiliary
/// sample are read; its responses never enter.
pub fn kde_truncated(aux: &Sample, n: u64, gamma: f64, k: &Kernel1D) -> Result<DensityEstimate> {
    if !(gamma > 0.0) {
        return Err(Error::invalid("kde needs gamma > 0"));
    }
    if n < 3 {
        return Err(Error::invalid("kde needs n >= 3"));
    }
    let ln_n = (n as f64).ln();
    let bandwidth = (ln_n / n as f64).powf(1.0 / (2.0 * (gamma + 1.0)));
    let b_n = ln_n.powi(-3);
    let a_n = (ln_n / n as f64).powf(gamma / (2.0 * (gamma + 1.0)));

    let xs: Vec<[f64; 2]> = aux.xs().to_vec();
    let index = BucketGrid::build(&xs, bandwidth.clamp(1e-3, 0.5));
    let kernel = k.clone();
    let m = xs.len() as f64;
    let bw = bandwidth;
    let raw = move |x1: f64, x2: f64| -> f64 {
        let mut acc = crate::numeric::CompensatedSum::new();
        let mut scratch = Vec::new();
        index.candidates_into(
            [x1 - 0.5 * bw, x2 - 0.5 * bw],
            [x1 + 0.5 * bw, x2 + 0.5 * bw],
            &mut scratch,
        );
        for &i in &scratch {
            let p = xs[i as usize];
            let u = (p[0] - x1) / bw;
            let v = (p[1] - x2) / bw;
            if u.abs() >= 0.5 || v.abs() >= 0.5 {
                continue;
            }
            acc.add(kernel.eval(u) * kernel.eval(v));
        }
        acc.value() / (m * bw * bw)
    };

    // core-grid extrema at the resolution the estimate itself varies on
    let steps = (6.0 / (0.5 * bandwidth)).ceil() as usize;
    let mut min_v = f64::INFINITY;
    let mut max_v = 0.0f64;
    for i in 0..=steps {
        for j in 0..=steps {
            let x = -3.0 + 6.0 * i as f64 / steps as f64;
            let y = -3.0 + 6.0 * j as f64 / steps as f64;
            let v = raw(x, y);
            min_v = min_v.min(v);
            max_v = max_v.max(v);
        }
    }
    let truncation_active = min_v <= b_n;
    Ok(DensityEstimate {
        eval: Arc::new(raw),
        g_hat_min: min_v.max(b_n),
        g_hat_sup: max_v,
        b_n,
        a_n,
        bandwidth,
        truncation_active,
    })
}

/// Threshold constants recomputed for the plug-in density: the density
/// lower bound becomes `g_hat_min^2 / (8 g_hat_sup)`.
pub fn plugin_constants(
    n: u64,
    noise: &NoiseEnvelope,
    params: &ProcedureParams,
    de: &DensityEstimate,
) -> Result<DerivedConstants> {
    let g_eff = de.g_hat_min * de.g_hat_min / (8.0 * de.g_hat_sup);
    let plugged = ProcedureParams {
        g_lower: g_eff.min(1.0 - f64::EPSILON),
        ..*params
    };
    derive_constants(n, noise, &plugged)
}

/// The additive threshold correction `2 a_n g_hat_min^{-1} ||k||_1^2
/// F_hat_inf`; add it to every per-scale threshold.
pub fn plugin_threshold_offset(de: &DensityEstimate, kernel_l1: f64, f_hat_inf: f64) -> f64 {
    2.0 * de.a_n / de.g_hat_min * kernel_l1 * kernel_l1 * f_hat_inf
}

/// The full modified threshold at scale `eta`.
pub fn plugin_threshold(
    eta: f64,
    n: u64,
    f_hat_inf: f64,
    de: &DensityEstimate,
    dc_plugged: &DerivedConstants,
    kernel_sup: f64,
    kernel_l1: f64,
) -> Result<f64> {
    let base = threshold(eta, n, f_hat_inf, dc_plugged, kernel_sup)?;
    Ok(base + plugin_threshold_offset(de, kernel_l1, f_hat_inf))
}
