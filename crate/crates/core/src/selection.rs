//! Joint data-driven choice of direction and bandwidth.
//!
//! For a target point `t`, every candidate `(theta, h)` on the direction
//! and dyadic bandwidth grids is scored by two agreement residuals plus
//! the threshold:
//!
//! - the first residual compares each two-direction estimate at scales
//!   `eta <= h` with the corresponding single-direction estimate;
//! - the second compares the single estimate at `h` against the same
//!   direction at every finer scale.
//!
//! Each comparison is clipped at the scale-dependent threshold before the
//! sup over scales, and the winner is the candidate minimizing
//! `R1 + R2 + TH(h)`, ties broken toward larger bandwidths and then lower
//! direction index. Per-point work caches all single estimates and each
//! unordered pair estimate exactly once.

use crate::constants::{threshold, DerivedConstants};
use crate::error::{Error, Result};
use crate::estimators::{DesignDensity, KernelEstimator, Sample};
use crate::geometry::Direction;
use crate::kernels::Kernel1D;
use rayon::prelude::*;

/// Descending dyadic bandwidths `{2^-k}` intersected with `[h_min/2, 1]`.
#[derive(Debug, Clone)]
pub struct BandwidthGrid {
    values: Vec<f64>,
}

impl BandwidthGrid {
    pub fn build(h_min: f64) -> Self {
        // the grid always contains 1; finer scales survive the
        // intersection with [h_min/2, 1]
        let mut values = vec![1.0];
        let mut h = 0.5f64;
        while h >= 0.5 * h_min {
            values.push(h);
            h *= 0.5;
        }
        BandwidthGrid { values }
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Uniformly spaced unit directions; the count must be even so that the
/// grid is closed under the antipodal map.
#[derive(Debug, Clone)]
pub struct DirectionGrid {
    directions: Vec<Direction>,
}

impl DirectionGrid {
    pub fn build(n_theta: usize) -> Result<Self> {
        if n_theta < 4 || !n_theta.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "direction grid size must be even and >= 4, got {n_theta}"
            )));
        }
        let directions = (0..n_theta)
            .map(|j| Direction::from_angle(std::f64::consts::TAU * j as f64 / n_theta as f64))
            .collect();
        Ok(DirectionGrid { directions })
    }

    #[inline]
    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Both grids for sample size `n`.
pub fn build_grids(
    n_theta: usize,
    dc: &DerivedConstants,
) -> Result<(BandwidthGrid, DirectionGrid)> {
    let _ = dc.n;
    Ok((
        BandwidthGrid::build(dc.h_min),
        DirectionGrid::build(n_theta)?,
    ))
}

/// Outcome of the minimization at one target point.
#[derive(Debug, Clone, Copy)]
pub struct SelectionResult {
    pub theta_hat: Direction,
    pub theta_index: usize,
    pub h_hat: f64,
    pub h_index: usize,
    pub objective: f64,
    pub r1: f64,
    pub r2: f64,
    pub th: f64,
    pub estimate: f64,
}

/// Everything fixed across target points: the estimator with its bucket
/// index, the grids, the preliminary sup-norm statistic and the
/// per-scale thresholds.
pub struct SelectionContext<'a> {
    pub estimator: KernelEstimator<'a>,
    pub dc: DerivedConstants,
    pub h_grid: BandwidthGrid,
    pub dir_grid: DirectionGrid,
    pub f_hat_inf: f64,
    th: Vec<f64>,
}

impl<'a> SelectionContext<'a> {
    pub fn new(
        sample: &'a Sample,
        density: &'a DesignDensity,
        kernel: &'a Kernel1D,
        dc: DerivedConstants,
        n_theta: usize,
    ) -> Result<Self> {
        Self::with_threshold_offset(sample, density, kernel, dc, n_theta, 0.0)
    }

    /// Same context with a constant added to every per-scale threshold;
    /// the plug-in density extension enters through here.
    pub fn with_threshold_offset(
        sample: &'a Sample,
        density: &'a DesignDensity,
        kernel: &'a Kernel1D,
        dc: DerivedConstants,
        n_theta: usize,
        offset: f64,
    ) -> Result<Self> {
        let estimator = KernelEstimator::new(sample, density, kernel);
        let (h_grid, dir_grid) = build_grids(n_theta, &dc)?;
        let f_hat_inf = estimator.preliminary_sup(&dc)?;
        let th = h_grid
            .values()
            .iter()
            .map(|&h| threshold(h, dc.n, f_hat_inf, &dc, kernel.sup_norm).map(|v| v + offset))
            .collect::<Result<Vec<f64>>>()?;
        Ok(SelectionContext {
            estimator,
            dc,
            h_grid,
            dir_grid,
            f_hat_inf,
            th,
        })
    }

    #[inline]
    pub fn thresholds(&self) -> &[f64] {
        &self.th
    }

    /// All single and pair estimates the rule needs at `t`.
    pub fn point_cache(&self, t: [f64; 2]) -> Result<PointCache> {
        PointCache::compute(&self.estimator, &self.dir_grid, &self.h_grid, t)
    }

    /// The two residuals of the candidate `(theta_index, h_index)` at `t`.
    pub fn residuals(&self, t: [f64; 2], theta_index: usize, h_index: usize) -> Result<(f64, f64)> {
        let cache = self.point_cache(t)?;
        Ok(cache.residuals(theta_index, h_index, &self.th))
    }

    /// Minimize the objective at `t`.
    pub fn select(&self, t: [f64; 2]) -> Result<SelectionResult> {
        let cache = self.point_cache(t)?;
        Ok(cache.decide(&self.th, &self.dir_grid, &self.h_grid))
    }

    /// Independent per-point selection, order preserving.
    pub fn estimate_on_grid(&self, points: &[[f64; 2]]) -> Result<Vec<SelectionResult>> {
        points.par_iter().map(|&t| self.select(t)).collect()
    }
}

/// Per-point estimate cache: single estimates `singles[j][k]`, the
/// direction-agreement statistic `d1[j][k] = sup_nu |pair - single|`, and
/// the scale-agreement statistic `d2[k][m] = sup_theta |single_k - single_m|`.
pub struct PointCache {
    n_dir: usize,
    n_h: usize,
    pub singles: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl PointCache {
    pub fn compute(
        estimator: &KernelEstimator<'_>,
        dir_grid: &DirectionGrid,
        h_grid: &BandwidthGrid,
        t: [f64; 2],
    ) -> Result<PointCache> {
        let dirs = dir_grid.directions();
        let hs = h_grid.values();
        let nd = dirs.len();
        let nk = hs.len();
        let mut scratch = Vec::new();

        let mut singles = vec![0.0; nd * nk];
        for (k, &h) in hs.iter().enumerate() {
            for (j, theta) in dirs.iter().enumerate() {
                singles[j * nk + k] = estimator.single_with_scratch(theta, h, t, &mut scratch)?;
            }
        }

        let mut d1 = vec![0.0f64; nd * nk];
        for (k, &h) in hs.iter().enumerate() {
            for j in 0..nd {
                for l in j..nd {
                    let p = estimator.pair_with_scratch(&dirs[j], &dirs[l], h, t, &mut scratch)?;
                    let gap_jl = (p - singles[l * nk + k]).abs();
                    if gap_jl > d1[j * nk + k] {
                        d1[j * nk + k] = gap_jl;
                    }
                    if l != j {
                        let gap_lj = (p - singles[j * nk + k]).abs();
                        if gap_lj > d1[l * nk + k] {
                            d1[l * nk + k] = gap_lj;
                        }
                    }
                }
            }
        }

        let mut d2 = vec![0.0f64; nk * nk];
        for k in 0..nk {
            for m in k..nk {
                let mut best = 0.0f64;
                for j in 0..nd {
                    let gap = (singles[j * nk + k] - singles[j * nk + m]).abs();
                    if gap > best {
                        best = gap;
                    }
                }
                d2[k * nk + m] = best;
            }
        }

        Ok(PointCache {
            n_dir: nd,
            n_h: nk,
            singles,
            d1,
            d2,
        })
    }

    #[inline]
    pub fn single(&self, j: usize, k: usize) -> f64 {
        self.singles[j * self.n_h + k]
    }

    /// `(R1, R2)` of candidate `(j, k)` for the given per-scale thresholds.
    /// Scales finer than `h_k` sit at indices `m >= k`; the clip at the
    /// threshold happens per scale, before the sup.
    pub fn residuals(&self, j: usize, k: usize, th: &[f64]) -> (f64, f64) {
        let nk = self.n_h;
        let mut r1 = 0.0f64;
        let mut r2 = 0.0f64;
        for m in k..nk {
            r1 = r1.max((self.d1[j * nk + m] - th[m]).max(0.0));
            r2 = r2.max((self.d2[k * nk + m] - th[m]).max(0.0));
        }
        (r1, r2)
    }

    /// Minimize `R1 + R2 + TH` over the grid; first strict minimum wins,
    /// scanning bandwidths from the largest down, directions in index
    /// order.
    pub fn decide(
        &self,
        th: &[f64],
        dir_grid: &DirectionGrid,
        h_grid: &BandwidthGrid,
    ) -> SelectionResult {
        let nk = self.n_h;
        let mut best: Option<(usize, usize, f64, f64, f64)> = None;
        for k in 0..nk {
            // R2 and the suffix structure of R1 share the loop over m.
            let mut r2 = 0.0f64;
            for m in k..nk {
                r2 = r2.max((self.d2[k * nk + m] - th[m]).max(0.0));
            }
            for j in 0..self.n_dir {
                let mut r1 = 0.0f64;
                for m in k..nk {
                    r1 = r1.max((self.d1[j * nk + m] - th[m]).max(0.0));
                }
                let obj = r1 + r2 + th[k];
                if best.is_none_or(|(_, _, _, _, o)| obj < o) {
                    best = Some((j, k, r1, r2, obj));
                }
            }
        }
        let (j, k, r1, r2, objective) = best.expect("grids are nonempty");
        SelectionResult {
            theta_hat: dir_grid.directions()[j],
            theta_index: j,
            h_hat: h_grid.values()[k],
            h_index: k,
            objective,
            r1,
            r2,
            th: th[k],
            estimate: self.single(j, k),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{derive_constants, Mode, NoiseEnvelope, ProcedureParams};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: u64, mode: Mode) -> (Kernel1D, DesignDensity, DerivedConstants) {
        let k = Kernel1D::triangular();
        let g = DesignDensity::uniform();
        let noise = NoiseEnvelope::new(0.5, 0.5, 2.0).unwrap();
        let params = ProcedureParams {
            r: 2.0,
            g_lower: 1.0 / 36.0,
            kernel_sup: k.sup_norm,
            kernel_l1: k.l1_norm,
            lipschitz_q: k.lipschitz_q,
            mode,
        };
        let dc = derive_constants(n, &noise, &params).unwrap();
        (k, g, dc)
    }

    fn random_sample(n: usize, seed: u64, signal: bool) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                [
                    rng.random::<f64>() * 6.0 - 3.0,
                    rng.random::<f64>() * 6.0 - 3.0,
                ]
            })
            .collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| {
                if signal {
                    (x[0] * 0.54 + x[1] * 0.84).sin() + 0.1 * rng.random::<f64>()
                } else {
                    0.0
                }
            })
            .collect();
        Sample::new(xs, ys).unwrap()
    }

    #[test]
    fn bandwidth_grid_enumeration() {
        // h_min from n = 1e4: grid runs 1, 1/2, ..., 2^-7
        let grid = BandwidthGrid::build(8.48304e-3);
        assert_eq!(grid.len(), 8);
        assert_eq!(grid.values()[0], 1.0);
        assert_eq!(grid.values()[7], 2f64.powi(-7));
        for (k, &h) in grid.values().iter().enumerate() {
            assert_eq!(h, 2f64.powi(-(k as i32)));
        }
        // degenerate intersection
        let tiny = BandwidthGrid::build(3.0);
        assert_eq!(tiny.values(), &[1.0]);
    }

    #[test]
    fn direction_grid_layout() {
        let g = DirectionGrid::build(4).unwrap();
        let d = g.directions();
        assert!((d[0].x() - 1.0).abs() < 1e-15 && d[0].y().abs() < 1e-15);
        assert!(d[1].x().abs() < 1e-15 && (d[1].y() - 1.0).abs() < 1e-15);
        assert!((d[2].x() + 1.0).abs() < 1e-15);
        assert!((d[3].y() + 1.0).abs() < 1e-15);
        assert!(DirectionGrid::build(5).is_err());
        assert!(DirectionGrid::build(2).is_err());
    }

    #[test]
    fn zero_responses_select_largest_bandwidth() {
        let s = random_sample(512, 21, false);
        let (k, g, dc) = setup(512, Mode::Calibrated { kappa: 1.0 });
        let ctx = SelectionContext::new(&s, &g, &k, dc, 8).unwrap();
        let res = ctx.select([0.0, 0.0]).unwrap();
        assert_eq!(res.h_hat, 1.0);
        assert_eq!(res.h_index, 0);
        assert_eq!(res.theta_index, 0);
        assert_eq!(res.estimate, 0.0);
        assert_eq!(res.r1, 0.0);
        assert_eq!(res.r2, 0.0);
        assert_eq!(res.objective, ctx.thresholds()[0]);
    }

    #[test]
    fn objective_decomposition_and_exhaustive_recheck() {
        let s = random_sample(1024, 33, true);
        let (k, g, dc) = setup(1024, Mode::Calibrated { kappa: 0.125 });
        let ctx = SelectionContext::new(&s, &g, &k, dc, 8).unwrap();
        let t = [0.1, -0.2];
        let res = ctx.select(t).unwrap();
        assert_eq!(res.objective, res.r1 + res.r2 + res.th);

        // independent recomputation of the objective over the whole grid
        let mut best = f64::INFINITY;
        let mut arg = (usize::MAX, usize::MAX);
        for k_idx in 0..ctx.h_grid.len() {
            for j in 0..ctx.dir_grid.len() {
                let (r1, r2) = ctx.residuals(t, j, k_idx).unwrap();
                let obj = r1 + r2 + ctx.thresholds()[k_idx];
                if obj < best {
                    best = obj;
                    arg = (j, k_idx);
                }
            }
        }
        assert_eq!(best, res.objective);
        assert_eq!(arg, (res.theta_index, res.h_index));
    }

    #[test]
    fn residuals_monotone_in_h_and_threshold() {
        let s = random_sample(1024, 55, true);
        let (k, g, dc) = setup(1024, Mode::Calibrated { kappa: 0.125 });
        let ctx = SelectionContext::new(&s, &g, &k, dc, 8).unwrap();
        let t = [0.0, 0.0];
        let cache = ctx.point_cache(t).unwrap();
        // nondecreasing in h along the grid (sup over a growing scale set)
        for j in 0..ctx.dir_grid.len() {
            let mut prev = (0.0, 0.0);
            for k_idx in (0..ctx.h_grid.len()).rev() {
                let cur = cache.residuals(j, k_idx, ctx.thresholds());
                assert!(cur.0 >= prev.0 - 1e-15);
                assert!(cur.1 >= prev.1 - 1e-15);
                prev = cur;
            }
        }
        // doubling every threshold never increases residuals
        let th2: Vec<f64> = ctx.thresholds().iter().map(|v| 2.0 * v).collect();
        for j in 0..ctx.dir_grid.len() {
            for k_idx in 0..ctx.h_grid.len() {
                let (a1, a2) = cache.residuals(j, k_idx, ctx.thresholds());
                let (b1, b2) = cache.residuals(j, k_idx, &th2);
                assert!(b1 <= a1 && b2 <= a2);
            }
        }
    }

    #[test]
    fn zero_residual_candidates_push_h_hat_up() {
        // if the objective at (j0, k0) equals TH(h_k0), the winner's
        // threshold cannot exceed it, so h_hat >= h_k0
        let s = random_sample(2048, 77, true);
        let (k, g, dc) = setup(2048, Mode::Calibrated { kappa: 0.25 });
        let ctx = SelectionContext::new(&s, &g, &k, dc, 8).unwrap();
        let t = [0.2, 0.2];
        let cache = ctx.point_cache(t).unwrap();
        let res = cache.decide(ctx.thresholds(), &ctx.dir_grid, &ctx.h_grid);
        for k_idx in 0..ctx.h_grid.len() {
            for j in 0..ctx.dir_grid.len() {
                let (r1, r2) = cache.residuals(j, k_idx, ctx.thresholds());
                if r1 + r2 == 0.0 {
                    assert!(res.th <= ctx.thresholds()[k_idx] + 1e-15);
                    assert!(res.h_hat >= ctx.h_grid.values()[k_idx]);
                }
            }
        }
    }

    #[test]
    fn cached_estimates_match_fresh_calls_bitwise() {
        let s = random_sample(700, 91, true);
        let (k, g, dc) = setup(700, Mode::Calibrated { kappa: 0.5 });
        let ctx = SelectionContext::new(&s, &g, &k, dc, 6).unwrap();
        let t = [-0.3, 0.4];
        let cache = ctx.point_cache(t).unwrap();
        for (j, theta) in ctx.dir_grid.directions().iter().enumerate() {
            for (k_idx, &h) in ctx.h_grid.values().iter().enumerate() {
                let fresh = ctx.estimator.single(theta, h, t).unwrap();
                assert_eq!(fresh.to_bits(), cache.single(j, k_idx).to_bits());
            }
        }
        let res = ctx.select(t).unwrap();
        let fresh = ctx.estimator.single(&res.theta_hat, res.h_hat, t).unwrap();
        assert_eq!(fresh.to_bits(), res.estimate.to_bits());
    }

    #[test]
    fn grid_selection_preserves_order_and_independence() {
        let s = random_sample(512, 13, true);
        let (k, g, dc) = setup(512, Mode::Calibrated { kappa: 0.5 });
        let ctx = SelectionContext::new(&s, &g, &k, dc, 6).unwrap();
        let pts = [[0.0, 0.0], [0.25, -0.25], [-0.4, 0.1]];
        let all = ctx.estimate_on_grid(&pts).unwrap();
        let single = ctx.select(pts[1]).unwrap();
        assert_eq!(all[1].estimate.to_bits(), single.estimate.to_bits());
        assert_eq!(all[1].h_hat, single.h_hat);

        let permuted = ctx.estimate_on_grid(&[pts[2], pts[0], pts[1]]).unwrap();
        assert_eq!(permuted[2].estimate.to_bits(), all[1].estimate.to_bits());
        assert_eq!(permuted[1].objective, all[0].objective);
    }
}
