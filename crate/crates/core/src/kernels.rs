//! Compactly supported univariate kernels and their planar products.
//!
//! Kernels are stored as exact piecewise polynomials on `[-1/2, 1/2]`, so
//! integrals, moments and norms come from closed-form antiderivatives
//! rather than quadrature. The selection threshold depends on the squared
//! sup norm of the kernel, which is why the metadata has to be tight.
//!
//! Two families are provided:
//!
//! - the triangular kernel `2(1 - 2|u|)`, order 1;
//! - polynomial kernels of arbitrary vanishing-moment order, obtained by
//!   solving the moment constraints exactly over the even polynomials
//!   that vanish at the support boundary. Orders above 1 take negative
//!   values somewhere; nothing downstream assumes nonnegativity.

use crate::error::{Error, Result};
use crate::numeric::{gauss_legendre, gauss_legendre_integrate};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

/// One polynomial piece of a kernel; `coeffs[j]` multiplies `u^j`.
#[derive(Debug, Clone)]
pub struct Piece {
    pub lo: f64,
    pub hi: f64,
    pub coeffs: Vec<f64>,
}

impl Piece {
    fn eval(&self, u: f64) -> f64 {
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * u + c;
        }
        acc
    }

    /// Exact `\int_lo^hi u^shift * p(u) du` via the antiderivative.
    fn integral_with_monomial(&self, shift: u32) -> f64 {
        let mut total = 0.0;
        for (j, &c) in self.coeffs.iter().enumerate() {
            let k = j as u32 + shift;
            let kp1 = (k + 1) as f64;
            total += c * (self.hi.powi(k as i32 + 1) - self.lo.powi(k as i32 + 1)) / kp1;
        }
        total
    }

    fn derivative_coeffs(&self) -> Vec<f64> {
        if self.coeffs.len() <= 1 {
            return vec![0.0];
        }
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, &c)| c * j as f64)
            .collect()
    }
}

fn eval_poly(coeffs: &[f64], u: f64) -> f64 {
    let mut acc = 0.0;
    for &c in coeffs.iter().rev() {
        acc = acc * u + c;
    }
    acc
}

/// Real roots of `coeffs` inside `(lo, hi)`, by sign scan plus bisection.
fn poly_roots(coeffs: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    const SCAN: usize = 4096;
    let mut roots = Vec::new();
    let step = (hi - lo) / SCAN as f64;
    let mut a = lo;
    let mut fa = eval_poly(coeffs, a);
    for i in 1..=SCAN {
        let b = lo + step * i as f64;
        let fb = eval_poly(coeffs, b);
        if fa == 0.0 {
            roots.push(a);
        } else if fa * fb < 0.0 {
            let (mut x0, mut x1, mut f0) = (a, b, fa);
            for _ in 0..200 {
                let m = 0.5 * (x0 + x1);
                let fm = eval_poly(coeffs, m);
                if fm == 0.0 || (x1 - x0) < 1e-16 {
                    x0 = m;
                    break;
                }
                if f0 * fm < 0.0 {
                    x1 = m;
                } else {
                    x0 = m;
                    f0 = fm;
                }
            }
            roots.push(0.5 * (x0 + x1));
        }
        a = b;
        fa = fb;
    }
    roots
}

/// A symmetric kernel with compact support `[-1/2, 1/2]`, unit integral,
/// and `moment_order` vanishing moments, stored with the closed-form
/// metadata the rest of the procedure consumes.
#[derive(Debug, Clone)]
pub struct Kernel1D {
    pieces: Vec<Piece>,
    pub sup_norm: f64,
    pub l1_norm: f64,
    pub l2_norm: f64,
    pub lipschitz_q: f64,
    pub moment_order: u32,
}

/// Norms and leading moments, as one bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelProperties {
    pub sup_norm: f64,
    pub l1_norm: f64,
    pub l2_norm: f64,
    /// `moments[j]` is the j-th moment, starting at j = 0 (the integral).
    pub moments: Vec<f64>,
}

impl Kernel1D {
    /// The triangular kernel `2(1 - 2|u|)` on `[-1/2, 1/2]`.
    pub fn triangular() -> Self {
        let pieces = vec![
            Piece {
                lo: -0.5,
                hi: 0.0,
                coeffs: vec![2.0, 4.0],
            },
            Piece {
                lo: 0.0,
                hi: 0.5,
                coeffs: vec![2.0, -4.0],
            },
        ];
        Kernel1D {
            pieces,
            sup_norm: 2.0,
            l1_norm: 1.0,
            l2_norm: (4.0f64 / 3.0).sqrt(),
            lipschitz_q: 4.0,
            moment_order: 1,
        }
    }

    /// Polynomial kernel whose moments `1..=order` vanish.
    ///
    /// The kernel is sought as `(1/4 - u^2) R(u)` with `R` an even
    /// polynomial, which forces symmetry and a continuous vanish at the
    /// support boundary (so the stored Lipschitz constant is global).
    /// The moment constraints form a small linear system that is solved
    /// in exact rational arithmetic.
    pub fn orthopoly(order: u32) -> Result<Self> {
        if !(1..=12).contains(&order) {
            return Err(Error::invalid(format!(
                "orthopoly kernel order must be in 1..=12, got {order}"
            )));
        }
        let k_max = (order / 2) as usize;
        let n = k_max + 1;

        // mu(2j) = \int_{-1/2}^{1/2} u^{2j} du = 4^{-j} / (2j + 1)
        let mu = |j: usize| -> BigRational {
            BigRational::new(
                BigInt::one(),
                BigInt::from(4u64).pow(j as u32) * BigInt::from(2 * j as u64 + 1),
            )
        };
        let quarter = BigRational::new(BigInt::one(), BigInt::from(4));

        // A[i][k] = \int (1/4 - u^2) u^{2k} u^{2i} du
        let mut a = vec![vec![BigRational::zero(); n]; n];
        for (i, row) in a.iter_mut().enumerate() {
            for (k, entry) in row.iter_mut().enumerate() {
                *entry = &quarter * mu(i + k) - mu(i + k + 1);
            }
        }
        let mut rhs = vec![BigRational::zero(); n];
        rhs[0] = BigRational::one();

        let r = solve_rational(&mut a, &mut rhs)?;

        // Expand (1/4 - u^2) * sum r_k u^{2k}; degree 2*k_max + 2.
        let mut coeffs_rat = vec![BigRational::zero(); 2 * k_max + 3];
        for (k, rk) in r.iter().enumerate() {
            coeffs_rat[2 * k] += &quarter * rk;
            coeffs_rat[2 * k + 2] -= rk;
        }
        let coeffs: Vec<f64> = coeffs_rat.iter().map(rational_to_f64).collect();

        let piece = Piece {
            lo: -0.5,
            hi: 0.5,
            coeffs,
        };
        let sup_norm = poly_sup(&piece);
        let l1_norm = poly_l1(&piece);
        let l2_norm = piece_l2(&piece).sqrt();
        let lipschitz_q = poly_sup(&Piece {
            lo: -0.5,
            hi: 0.5,
            coeffs: piece.derivative_coeffs(),
        });
        Ok(Kernel1D {
            pieces: vec![piece],
            sup_norm,
            l1_norm,
            l2_norm,
            lipschitz_q,
            moment_order: order,
        })
    }

    /// Evaluate the kernel; exactly zero outside `[-1/2, 1/2]`.
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        if !(-0.5..=0.5).contains(&u) {
            return 0.0;
        }
        for p in &self.pieces {
            if u <= p.hi {
                return p.eval(u);
            }
        }
        0.0
    }

    /// The product kernel `K(u, v) = k(u) k(v)`.
    #[inline]
    pub fn eval2(&self, u: f64, v: f64) -> f64 {
        if !(-0.5..=0.5).contains(&u) || !(-0.5..=0.5).contains(&v) {
            return 0.0;
        }
        self.eval(u) * self.eval(v)
    }

    /// Exact j-th moment by per-piece antiderivatives.
    pub fn moment(&self, j: u32) -> f64 {
        self.pieces
            .iter()
            .map(|p| p.integral_with_monomial(j))
            .sum()
    }

    /// Norms and moments `0..=max_moment`, closed form.
    pub fn properties(&self, max_moment: u32) -> KernelProperties {
        KernelProperties {
            sup_norm: self.sup_norm,
            l1_norm: self.l1_norm,
            l2_norm: self.l2_norm,
            moments: (0..=max_moment).map(|j| self.moment(j)).collect(),
        }
    }

    /// Interior points where the kernel changes polynomial piece; used to
    /// split quadratures so every subinterval is smooth.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.pieces
            .iter()
            .map(|p| p.hi)
            .filter(|&x| x > -0.5 && x < 0.5)
            .collect()
    }

    /// Moments computed by Gauss–Legendre quadrature per piece; the
    /// independent cross-check for [`Kernel1D::moment`].
    pub fn moment_by_quadrature(&self, j: u32) -> f64 {
        let nodes = gauss_legendre(48);
        self.pieces
            .iter()
            .map(|p| {
                gauss_legendre_integrate(&|u: f64| u.powi(j as i32) * p.eval(u), p.lo, p.hi, &nodes)
            })
            .sum()
    }
}

/// Kernel selection as it appears in configuration files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
#[derive(Default)]
pub enum KernelSpec {
    #[default]
    Triangular,
    Orthopoly {
        order: u32,
    },
}

impl KernelSpec {
    pub fn build(&self) -> Result<Kernel1D> {
        match self {
            KernelSpec::Triangular => Ok(Kernel1D::triangular()),
            KernelSpec::Orthopoly { order } => Kernel1D::orthopoly(*order),
        }
    }
}

fn solve_rational(a: &mut [Vec<BigRational>], b: &mut [BigRational]) -> Result<Vec<BigRational>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .find(|&r| !a[r][col].is_zero())
            .ok_or_else(|| Error::invalid("singular moment system in kernel construction"))?;
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col].clone();
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = &a[r][col] / &p;
            if factor.is_zero() {
                continue;
            }
            for c in col..n {
                let sub = &factor * &a[col][c];
                a[r][c] -= sub;
            }
            let sub = &factor * &b[col];
            b[r] -= sub;
        }
    }
    Ok((0..n).map(|i| &b[i] / &a[i][i]).collect())
}

fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("finite rational")
}

/// Max of `|p|` over the piece, from endpoints plus critical points.
fn poly_sup(p: &Piece) -> f64 {
    let mut best = p.eval(p.lo).abs().max(p.eval(p.hi).abs());
    for r in poly_roots(&p.derivative_coeffs(), p.lo, p.hi) {
        best = best.max(p.eval(r).abs());
    }
    best
}

/// `\int |p|` over the piece: split at the sign changes, sum absolute
/// closed-form integrals.
fn poly_l1(p: &Piece) -> f64 {
    let mut cuts = poly_roots(&p.coeffs, p.lo, p.hi);
    cuts.push(p.hi);
    let mut lo = p.lo;
    let mut total = 0.0;
    for hi in cuts {
        if hi <= lo {
            continue;
        }
        let seg = Piece {
            lo,
            hi,
            coeffs: p.coeffs.clone(),
        };
        total += seg.integral_with_monomial(0).abs();
        lo = hi;
    }
    total
}

fn piece_l2(p: &Piece) -> f64 {
    // coefficients of p^2
    let d = p.coeffs.len();
    let mut sq = vec![0.0; 2 * d - 1];
    for i in 0..d {
        for j in 0..d {
            sq[i + j] += p.coeffs[i] * p.coeffs[j];
        }
    }
    Piece {
        lo: p.lo,
        hi: p.hi,
        coeffs: sq,
    }
    .integral_with_monomial(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn triangular_basics() {
        let k = Kernel1D::triangular();
        assert_eq!(k.eval(0.0), 2.0);
        assert_eq!(k.eval(0.5), 0.0);
        assert_eq!(k.eval(0.7), 0.0);
        assert_eq!(k.eval(-0.7), 0.0);
        assert!((k.moment(0) - 1.0).abs() < 1e-12);
        assert_eq!(k.moment(1), 0.0);
        assert!((k.l1_norm - 1.0).abs() < 1e-15);
        assert!((k.l2_norm * k.l2_norm - 4.0 / 3.0).abs() < 1e-14);
        // 4 \int_0^{1/2} (1 - 2u) u^2 du = 1/24
        assert!((k.moment(2) - 1.0 / 24.0).abs() < 1e-15);
        assert_eq!(k.sup_norm, 2.0);
        assert_eq!(k.lipschitz_q, 4.0);
    }

    #[test]
    fn product_kernel_values() {
        let k = Kernel1D::triangular();
        assert_eq!(k.eval2(0.0, 0.0), 4.0);
        assert_eq!(k.eval2(0.3, 0.6), 0.0);
        assert_eq!(k.eval2(0.5, 0.0), 0.0);
    }

    #[test]
    fn symmetry_is_exact() {
        for k in [Kernel1D::triangular(), Kernel1D::orthopoly(4).unwrap()] {
            for i in 0..=1000 {
                let u = -0.6 + 1.2 * i as f64 / 1000.0;
                assert_eq!(k.eval(u), k.eval(-u), "u = {u}");
            }
        }
    }

    #[test]
    fn orthopoly_order_one_is_parabolic() {
        // (1/4 - u^2) R with scalar R: R = 6, the Epanechnikov shape.
        let k = Kernel1D::orthopoly(1).unwrap();
        assert!((k.eval(0.0) - 1.5).abs() < 1e-12);
        assert!((k.moment(0) - 1.0).abs() < 1e-12);
        assert_eq!(k.moment(1), 0.0);
    }

    #[test]
    fn orthopoly_vanishing_moments() {
        for order in [1u32, 2, 3, 4, 6, 8, 12] {
            let k = Kernel1D::orthopoly(order).unwrap();
            assert!((k.moment(0) - 1.0).abs() < 1e-12, "order {order}");
            for j in 1..=order {
                assert!(
                    k.moment(j).abs() < 1e-10,
                    "order {order} moment {j} = {}",
                    k.moment(j)
                );
            }
            assert_eq!(k.eval(0.5), 0.0);
            assert_eq!(k.eval(-0.5), 0.0);
        }
    }

    #[test]
    fn orthopoly_order_out_of_range() {
        assert!(Kernel1D::orthopoly(0).is_err());
        assert!(Kernel1D::orthopoly(13).is_err());
    }

    #[test]
    fn quadrature_cross_checks_exact_moments() {
        for k in [
            Kernel1D::triangular(),
            Kernel1D::orthopoly(3).unwrap(),
            Kernel1D::orthopoly(6).unwrap(),
        ] {
            for j in 0..=k.moment_order {
                assert!(
                    (k.moment(j) - k.moment_by_quadrature(j)).abs() < 1e-12,
                    "moment {j}"
                );
            }
        }
    }

    #[test]
    fn separability_identity() {
        let k = Kernel1D::orthopoly(3).unwrap();
        for (u, v) in [(0.1, -0.3), (0.45, 0.2), (-0.25, -0.25)] {
            let lhs = k.eval2(u, v) * k.eval2(0.0, 0.0);
            let rhs = k.eval2(u, 0.0) * k.eval2(0.0, v);
            assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn spec_via_config_keys() {
        assert!(KernelSpec::Triangular.build().is_ok());
        assert!(KernelSpec::Orthopoly { order: 3 }.build().is_ok());
        assert!(KernelSpec::Orthopoly { order: 40 }.build().is_err());
    }

    proptest! {
        #[test]
        fn lipschitz_bound_holds(u in -0.6f64..0.6, v in -0.6f64..0.6) {
            for k in [Kernel1D::triangular(), Kernel1D::orthopoly(2).unwrap(), Kernel1D::orthopoly(5).unwrap()] {
                let lhs = (k.eval(u) - k.eval(v)).abs();
                prop_assert!(lhs <= k.lipschitz_q * (u - v).abs() + 1e-12);
            }
        }
    }
}
