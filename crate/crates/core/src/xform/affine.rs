use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::Transform;

pub const DEFAULT_SINGULAR_TOL: f64 = 1e-6;

/// `p ↦ matrix · p + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform3D {
    pub matrix: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for AffineTransform3D {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform3D {
    pub fn identity() -> Self {
        AffineTransform3D {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        AffineTransform3D {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn new(matrix: [[f64; 3]; 3], translation: [f64; 3]) -> Self {
        AffineTransform3D {
            matrix,
            translation,
        }
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn is_singular(&self, tol: f64) -> bool {
        !(self.det().abs() >= tol)
    }

    pub fn inverse(&self) -> Option<Self> {
        let m = Matrix3::from_fn(|r, c| self.matrix[r][c]);
        let inv = m.try_inverse()?;
        let t = nalgebra::Vector3::from(self.translation);
        let ti = -(inv * t);
        Some(AffineTransform3D {
            matrix: [
                [inv[(0, 0)], inv[(0, 1)], inv[(0, 2)]],
                [inv[(1, 0)], inv[(1, 1)], inv[(1, 2)]],
                [inv[(2, 0)], inv[(2, 1)], inv[(2, 2)]],
            ],
            translation: [ti[0], ti[1], ti[2]],
        })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.matrix[r][k] * other.matrix[k][c]).sum();
            }
        }
        AffineTransform3D {
            matrix: m,
            translation: self.apply(other.translation),
        }
    }

    /// Row-major matrix followed by the translation.
    pub fn to_params(&self) -> [f64; 12] {
        let m = &self.matrix;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            self.translation[0], self.translation[1], self.translation[2],
        ]
    }

    pub fn from_params(p: &[f64; 12]) -> Self {
        AffineTransform3D {
            matrix: [[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], p[8]]],
            translation: [p[9], p[10], p[11]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_params().iter().all(|v| v.is_finite())
    }
}

impl Transform for AffineTransform3D {
    #[inline]
    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + self.translation[0],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + self.translation[1],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + self.translation[2],
        ]
    }
}

/// True iff `|det(matrix)| < tol`.
pub fn affine_is_singular(a: &AffineTransform3D, tol: f64) -> bool {
    a.is_singular(tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singularity() {
        let id = AffineTransform3D::identity();
        assert!(!affine_is_singular(&id, DEFAULT_SINGULAR_TOL));
        let mut z = id;
        z.matrix[1] = [0.0; 3];
        assert!(affine_is_singular(&z, DEFAULT_SINGULAR_TOL));
        let mut d = id;
        d.matrix[2][2] = 1e-9;
        assert_eq!(d.det(), 1e-9);
        assert!(affine_is_singular(&d, 1e-6));
        let nan = AffineTransform3D::new([[f64::NAN; 3]; 3], [0.0; 3]);
        assert!(affine_is_singular(&nan, 1e-6));
    }

    #[test]
    fn inverse_and_compose() {
        let a = AffineTransform3D::new([[2.0, 0.1, 0.0], [0.0, 1.0, 0.3], [0.2, 0.0, 0.5]], [1.0, -2.0, 3.0]);
        let inv = a.inverse().unwrap();
        let p = [0.3, -4.0, 7.5];
        let q = inv.apply(a.apply(p));
        for k in 0..3 {
            assert!((q[k] - p[k]).abs() < 1e-12);
        }
        let c = a.compose(&inv);
        let r = c.apply(p);
        for k in 0..3 {
            assert!((r[k] - p[k]).abs() < 1e-12);
        }
        assert_eq!(AffineTransform3D::from_params(&a.to_params()), a);
    }
}
