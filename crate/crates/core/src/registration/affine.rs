use std::fmt;

use super::RegistrationError;

/// 2×3 affine map `[a b tx; c d ty]` taking `(x, y)` to
/// `(a·x + b·y + tx, c·x + d·y + ty)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub m: [f64; 6],
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0] };

    pub fn new(m: [f64; 6]) -> Self {
        AffineTransform { m }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        AffineTransform { m: [1.0, 0.0, tx, 0.0, 1.0, ty] }
    }

    /// Rotation by `theta` radians about `(cx, cy)` in pixel coordinates.
    pub fn rotation_about(theta: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = theta.sin_cos();
        AffineTransform { m: [c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy] }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }

    pub fn determinant(&self) -> f64 {
        self.m[0] * self.m[4] - self.m[1] * self.m[3]
    }

    pub fn is_invertible(&self) -> bool {
        let det = self.determinant();
        det.is_finite() && det.abs() > 1e-12 && self.m.iter().all(|v| v.is_finite())
    }

    pub fn inverse(&self) -> Result<AffineTransform, RegistrationError> {
        if !self.is_invertible() {
            return Err(RegistrationError::SingularTransform);
        }
        let [a, b, tx, c, d, ty] = self.m;
        let det = a * d - b * c;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(AffineTransform { m: [ia, ib, -(ia * tx + ib * ty), ic, id, -(ic * tx + id * ty)] })
    }

    /// `self` applied first, then `next`.
    pub fn then(&self, next: &AffineTransform) -> AffineTransform {
        let [a1, b1, t1, c1, d1, u1] = self.m;
        let [a2, b2, t2, c2, d2, u2] = next.m;
        AffineTransform {
            m: [
                a2 * a1 + b2 * c1,
                a2 * b1 + b2 * d1,
                a2 * t1 + b2 * u1 + t2,
                c2 * a1 + d2 * c1,
                c2 * b1 + d2 * d1,
                c2 * t1 + d2 * u1 + u2,
            ],
        }
    }

    /// Least-squares fit of `dst ≈ A·src` over the given correspondences.
    /// Exact for three non-collinear pairs.
    pub fn fit(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<AffineTransform, RegistrationError> {
        assert_eq!(src.len(), dst.len());
        let n = src.len();
        if n < 3 {
            return Err(RegistrationError::TooFewMatches(n));
        }
        let inv_n = 1.0 / n as f64;
        let (sx, sy) = src.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let (dx, dy) = dst.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let (msx, msy, mdx, mdy) = (sx * inv_n, sy * inv_n, dx * inv_n, dy * inv_n);
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        let (mut uxx, mut uxy, mut vyx, mut vyy) = (0.0, 0.0, 0.0, 0.0);
        for (p, q) in src.iter().zip(dst) {
            let (x, y) = (p.0 - msx, p.1 - msy);
            let (u, v) = (q.0 - mdx, q.1 - mdy);
            sxx += x * x;
            sxy += x * y;
            syy += y * y;
            uxx += u * x;
            uxy += u * y;
            vyx += v * x;
            vyy += v * y;
        }
        let det = sxx * syy - sxy * sxy;
        let scale = (sxx + syy).max(f64::MIN_POSITIVE);
        if !(det.abs() > 1e-12 * scale * scale) {
            return Err(RegistrationError::DegenerateSample);
        }
        let a = (uxx * syy - uxy * sxy) / det;
        let b = (uxy * sxx - uxx * sxy) / det;
        let c = (vyx * syy - vyy * sxy) / det;
        let d = (vyy * sxx - vyx * sxy) / det;
        Ok(AffineTransform { m: [a, b, mdx - a * msx - b * msy, c, d, mdy - c * msx - d * msy] })
    }

    /// Six whitespace-separated numbers, row-major, on one line.
    pub fn to_text(&self) -> String {
        let m = &self.m;
        format!("{} {} {} {} {} {}\n", m[0], m[1], m[2], m[3], m[4], m[5])
    }

    pub fn from_text(text: &str) -> Result<AffineTransform, RegistrationError> {
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| RegistrationError::Parse(format!("not a number: {t:?}"))))
            .collect::<Result<_, _>>()?;
        let m: [f64; 6] = values
            .try_into()
            .map_err(|v: Vec<f64>| RegistrationError::Parse(format!("expected 6 coefficients, found {}", v.len())))?;
        Ok(AffineTransform { m })
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl fmt::Display for AffineTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.m;
        write!(f, "[{:.6} {:.6} {:.3}; {:.6} {:.6} {:.3}]", m[0], m[1], m[2], m[3], m[4], m[5])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_fit_from_three_points() {
        let truth = AffineTransform::new([1.01, 0.02, 5.0, -0.02, 1.01, -3.0]);
        let src = [(10.0, 20.0), (200.0, 35.0), (60.0, 180.0)];
        let dst: Vec<_> = src.iter().map(|&(x, y)| truth.apply(x, y)).collect();
        let fit = AffineTransform::fit(&src, &dst).unwrap();
        for (a, b) in fit.m.iter().zip(truth.m) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let src = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)];
        assert!(matches!(AffineTransform::fit(&src, &src), Err(RegistrationError::DegenerateSample)));
    }

    #[test]
    fn singular_has_no_inverse() {
        let t = AffineTransform::new([1.0, 2.0, 0.0, 2.0, 4.0, 0.0]);
        assert!(matches!(t.inverse(), Err(RegistrationError::SingularTransform)));
    }

    #[test]
    fn text_round_trip() {
        let t = AffineTransform::new([0.1, -2.5e-7, 13.25, 1.0 / 3.0, 0.99, -4.0]);
        assert_eq!(AffineTransform::from_text(&t.to_text()).unwrap(), t);
        assert!(AffineTransform::from_text("1 2 3").is_err());
    }

    proptest! {
        #[test]
        fn inverse_and_composition(a in 0.5f64..2.0, b in -0.4f64..0.4, c in -0.4f64..0.4, d in 0.5f64..2.0,
                                   tx in -50.0f64..50.0, ty in -50.0f64..50.0, x in -100.0f64..100.0, y in -100.0f64..100.0) {
            let t = AffineTransform::new([a, b, tx, c, d, ty]);
            let inv = t.inverse().unwrap();
            let (u, v) = t.apply(x, y);
            let (bx, by) = inv.apply(u, v);
            prop_assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
            let composed = t.then(&inv);
            for (p, q) in composed.m.iter().zip(AffineTransform::IDENTITY.m) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }
    }
}
