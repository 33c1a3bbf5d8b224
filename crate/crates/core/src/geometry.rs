//! Rotation/anisotropy matrices for the directional estimator family.
//!
//! A single-direction matrix squeezes the plane by `1/h` along `theta`
//! while keeping unit extent across it. A pair matrix does the analogue
//! for the bisector of two directions; it is exactly a rescaled
//! single-direction matrix (the dilation identity below), which is what
//! lets one evaluation path serve both estimator kinds.

use crate::error::{Error, Result};

/// A unit vector in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    x: f64,
    y: f64,
}

impl Direction {
    /// Build from components that must already be unit length (1e-12).
    pub fn new(x: f64, y: f64) -> Result<Self> {
        let norm_sq = x * x + y * y;
        if (norm_sq - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "direction ({x}, {y}) is not unit length"
            )));
        }
        Ok(Direction { x, y })
    }

    /// Normalize an arbitrary nonzero vector.
    pub fn unit(x: f64, y: f64) -> Result<Self> {
        let n = (x * x + y * y).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid(
                "cannot normalize a zero or non-finite vector",
            ));
        }
        Ok(Direction { x: x / n, y: y / n })
    }

    pub fn from_angle(a: f64) -> Self {
        Direction {
            x: a.cos(),
            y: a.sin(),
        }
    }

    #[inline]
    pub fn x(&self) -> f64 {
        self.x
    }

    #[inline]
    pub fn y(&self) -> f64 {
        self.y
    }

    #[inline]
    pub fn dot(&self, other: &Direction) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// The counterclockwise perpendicular `(-y, x)`.
    #[inline]
    pub fn perp(&self) -> Direction {
        Direction {
            x: -self.y,
            y: self.x,
        }
    }

    #[inline]
    pub fn neg(&self) -> Direction {
        Direction {
            x: -self.x,
            y: -self.y,
        }
    }

    pub fn angle(&self) -> f64 {
        self.y.atan2(self.x)
    }
}

/// A 2x2 matrix with its determinant cached at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Matrix2 {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub det: f64,
}

impl Matrix2 {
    pub fn new(a11: f64, a12: f64, a21: f64, a22: f64) -> Self {
        Matrix2 {
            a11,
            a12,
            a21,
            a22,
            det: a11 * a22 - a12 * a21,
        }
    }

    #[inline]
    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.a11 * v[0] + self.a12 * v[1],
            self.a21 * v[0] + self.a22 * v[1],
        ]
    }

    /// Max absolute entry.
    pub fn sup_entry(&self) -> f64 {
        self.a11
            .abs()
            .max(self.a12.abs())
            .max(self.a21.abs())
            .max(self.a22.abs())
    }

    pub fn inverse(&self) -> Matrix2 {
        let d = self.det;
        Matrix2::new(self.a22 / d, -self.a12 / d, -self.a21 / d, self.a11 / d)
    }
}

fn check_bandwidth(h: f64) -> Result<()> {
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::invalid(format!(
            "bandwidth must lie in (0, 1], got {h}"
        )));
    }
    Ok(())
}

/// Rows `(theta1/h, theta2/h)` and `(-theta2, theta1)`; determinant `1/h`.
pub fn single_matrix(theta: &Direction, h: f64) -> Result<Matrix2> {
    check_bandwidth(h)?;
    let mut m = Matrix2::new(theta.x() / h, theta.y() / h, -theta.y(), theta.x());
    // the determinant is 1/h by construction; store it exactly
    m.det = 1.0 / h;
    Ok(m)
}

/// Geometric reduction of a pair matrix to a single-direction matrix:
/// with `s = 1 + |nu.theta|` and axis `e = unit(theta + nu)` (or
/// `unit(nu - theta)` when `nu.theta < 0`), the pair matrix equals
/// `(2s)^{-1/2} * single_matrix(e, h)` entrywise, so its determinant is
/// `1/(2sh)`, inside `[1/(4h), 1/(2h)]`.
#[derive(Debug, Clone, Copy)]
pub struct PairGeometry {
    pub axis: Direction,
    /// `(2(1 + |nu.theta|))^{-1/2}`, the entrywise dilation factor.
    pub scale: f64,
    pub det: f64,
}

pub fn pair_geometry(theta: &Direction, nu: &Direction, h: f64) -> Result<PairGeometry> {
    check_bandwidth(h)?;
    let dot = nu.dot(theta);
    let s = 1.0 + dot.abs();
    let base = if dot >= 0.0 { *theta } else { theta.neg() };
    let axis = Direction::unit(base.x() + nu.x(), base.y() + nu.y())?;
    Ok(PairGeometry {
        axis,
        scale: 1.0 / (2.0 * s).sqrt(),
        det: 1.0 / (2.0 * s * h),
    })
}

/// The two-direction matrix, written out entrywise. The sign rule
/// replaces `theta` by `-theta` when `nu.theta < 0`, which keeps the
/// bisector well defined for near-antipodal pairs.
pub fn pair_matrix(theta: &Direction, nu: &Direction, h: f64) -> Result<Matrix2> {
    check_bandwidth(h)?;
    let dot = nu.dot(theta);
    let t = if dot >= 0.0 { *theta } else { theta.neg() };
    let s = 1.0 + dot.abs();
    let u1 = t.x() + nu.x();
    let u2 = t.y() + nu.y();
    Ok(Matrix2::new(
        u1 / (2.0 * h * s),
        u2 / (2.0 * h * s),
        -u2 / (2.0 * s),
        u1 / (2.0 * s),
    ))
}

/// Membership in the matrix class with determinant cap `cap_a` and
/// entry-to-determinant ratio parameter `a`: `|det| <= cap_a` and
/// `|E|_inf <= (2a)^{-1/2} |det|`.
pub fn class_membership(e: &Matrix2, a: f64, cap_a: f64) -> bool {
    let det = e.det.abs();
    det <= cap_a && e.sup_entry() <= det / (2.0 * a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dir(x: f64, y: f64) -> Direction {
        Direction::new(x, y).unwrap()
    }

    #[test]
    fn single_matrix_substitutions() {
        let m = single_matrix(&dir(1.0, 0.0), 0.25).unwrap();
        assert_eq!((m.a11, m.a12, m.a21, m.a22), (4.0, 0.0, -0.0, 1.0));
        assert_eq!(m.det, 4.0);

        let m = single_matrix(&dir(0.0, 1.0), 1.0).unwrap();
        assert_eq!((m.a11, m.a12, m.a21, m.a22), (0.0, 1.0, -1.0, 0.0));
        assert_eq!(m.det, 1.0);

        assert!(single_matrix(&dir(1.0, 0.0), 0.0).is_err());
        assert!(single_matrix(&dir(1.0, 0.0), -0.1).is_err());
    }

    #[test]
    fn pair_matrix_equal_directions() {
        let m = pair_matrix(&dir(1.0, 0.0), &dir(1.0, 0.0), 0.25).unwrap();
        assert_eq!((m.a11, m.a12, m.a21, m.a22), (2.0, 0.0, -0.0, 0.5));
        assert!((m.det - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pair_matrix_orthogonal_directions() {
        let m = pair_matrix(&dir(1.0, 0.0), &dir(0.0, 1.0), 0.5).unwrap();
        let h = 0.5;
        assert!(m.det >= 1.0 / (4.0 * h) - 1e-15);
        assert!(m.det <= 1.0 / (2.0 * h) + 1e-15);
        // s = 1, so the determinant sits at the upper end
        assert!((m.det - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pair_matrix_antipodal_sign_rule() {
        // nu = -theta reduces to the equal-direction case under the flip
        let m = pair_matrix(&dir(1.0, 0.0), &dir(-1.0, 0.0), 0.25).unwrap();
        let same = pair_matrix(&dir(-1.0, 0.0), &dir(-1.0, 0.0), 0.25).unwrap();
        assert_eq!(
            (m.a11, m.a12, m.a21, m.a22),
            (same.a11, same.a12, same.a21, same.a22)
        );
        assert!((m.det - 1.0).abs() < 1e-15);
    }

    #[test]
    fn class_membership_arithmetic() {
        let e = Matrix2::new(4.0, 0.0, 0.0, 1.0);
        assert!(class_membership(&e, 1.0 / 8.0, 8.0));
        assert!(!class_membership(&e, 1.0 / 8.0, 2.0));
    }

    #[test]
    fn dilation_identity_examples() {
        let theta = Direction::from_angle(0.7);
        let nu = Direction::from_angle(2.1);
        let h = 0.3;
        let pg = pair_geometry(&theta, &nu, h).unwrap();
        let single = single_matrix(&pg.axis, h).unwrap();
        let pair = pair_matrix(&theta, &nu, h).unwrap();
        for (p, s) in [
            (pair.a11, single.a11),
            (pair.a12, single.a12),
            (pair.a21, single.a21),
            (pair.a22, single.a22),
        ] {
            assert!((p - pg.scale * s).abs() < 1e-12, "{p} vs {}", pg.scale * s);
        }
        assert!((pair.det - pg.det).abs() < 1e-12 * pg.det);
    }

    proptest! {
        #[test]
        fn pair_matrix_properties(
            a in 0.0f64..std::f64::consts::TAU,
            b in 0.0f64..std::f64::consts::TAU,
            h in 0.01f64..1.0,
        ) {
            let theta = Direction::from_angle(a);
            let nu = Direction::from_angle(b);
            let m = pair_matrix(&theta, &nu, h).unwrap();

            // determinant range
            prop_assert!(m.det >= 1.0 / (4.0 * h) - 1e-12 / h);
            prop_assert!(m.det <= 1.0 / (2.0 * h) + 1e-12 / h);

            // exchange symmetry up to elementwise negation
            let sw = pair_matrix(&nu, &theta, h).unwrap();
            let same = (m.a11 - sw.a11).abs() + (m.a12 - sw.a12).abs()
                + (m.a21 - sw.a21).abs() + (m.a22 - sw.a22).abs();
            let neg = (m.a11 + sw.a11).abs() + (m.a12 + sw.a12).abs()
                + (m.a21 + sw.a21).abs() + (m.a22 + sw.a22).abs();
            prop_assert!(same < 1e-12 / h || neg < 1e-12 / h);

            // dilation identity
            let pg = pair_geometry(&theta, &nu, h).unwrap();
            let s = single_matrix(&pg.axis, h).unwrap();
            prop_assert!((m.a11 - pg.scale * s.a11).abs() < 1e-12 / h);
            prop_assert!((m.a22 - pg.scale * s.a22).abs() < 1e-12);

            // class membership for the parameters the selection rule uses
            let h_min = 8.483e-3;
            if h >= h_min {
                prop_assert!(class_membership(&m, 0.125, 1.0 / h_min));
                let sm = single_matrix(&theta, h).unwrap();
                prop_assert!(class_membership(&sm, 0.125, 1.0 / h_min));
            }
        }
    }
}
