//! Adaptive single-index kernel regression.
//!
//! The library estimates a bivariate regression function of the form
//! `F(x) = f(x·theta)` — all variation runs along one unknown unit
//! direction `theta` — from noisy random-design observations, adapting
//! simultaneously to the direction and to the smoothness of the link
//! function `f`. The driver is a comparison-of-estimators scheme: a family
//! of directional kernel estimators indexed by `(theta, h)` is screened
//! through pairwise agreement residuals against a data-driven threshold,
//! and the most-smoothed admissible candidate wins.
//!
//! Module map:
//!
//! - [`kernels`] — compactly supported univariate kernels (exact piecewise
//!   polynomials) and their product extension to the plane.
//! - [`geometry`] — the rotation/anisotropy matrices behind the estimator
//!   family and the matrix class they live in.
//! - [`constants`] — every sample-size-dependent quantity of the
//!   procedure: bandwidth scales, tail envelopes, threshold constants,
//!   minimal sample sizes.
//! - [`estimators`] — weighted kernel sums over bucketed samples: single
//!   estimators, pair (two-direction) estimators, and the preliminary
//!   sup-norm estimate.
//! - [`selection`] — dyadic bandwidth and uniform direction grids,
//!   agreement residuals, and the joint `(theta, h)` minimizer.
//! - [`oracle`] — approximation-error functionals, their maximal-function
//!   smoothing, the oracle bandwidth, and quadrature bias functionals.
//! - [`rates`] — closed-form adaptive and minimax rate formulas.
//! - [`density`] — plug-in design-density estimation for the
//!   unknown-density variant of the procedure.
//! - [`harness`] — synthetic data generation, Monte Carlo risk
//!   estimation, rate fitting, and threshold calibration.

// Validation uses `!(x > 0.0)` deliberately: unlike `x <= 0.0`, the
// negated form also rejects NaN. Index loops mirror the triangular /
// suffix structure of the grid recursions.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod constants;
pub mod density;
pub mod error;
pub mod estimators;
pub mod geometry;
pub mod harness;
pub mod kernels;
pub mod numeric;
pub mod oracle;
pub mod rates;
pub mod selection;

pub use error::{Error, Result};
