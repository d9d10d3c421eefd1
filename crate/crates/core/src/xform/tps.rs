//! 3D thin-plate splines with the polyharmonic kernel `U(r) = r`.
//!
//! For control points `c_i` and targets `y_i` the coefficients solve
//!
//! ```text
//! | K + λI  P | | W |   | Y |
//! | Pᵀ      0 | | A | = | 0 |
//! ```
//!
//! with `K_ij = |c_i - c_j|` and `P_i = (1, x_i, y_i, z_i)`. The lower block
//! enforces `Σ w_i = 0` and `Σ w_i c_iᵀ = 0`, so an affine-consistent landmark
//! set is reproduced by the polynomial part alone.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use super::{dist, AffineTransform3D, LandmarkSet, Transform};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpsTransform {
    pub control_pts: Vec<[f64; 3]>,
    pub weights: Vec<[f64; 3]>,
    pub affine: AffineTransform3D,
}

impl TpsTransform {
    pub fn identity() -> Self {
        TpsTransform {
            control_pts: Vec::new(),
            weights: Vec::new(),
            affine: AffineTransform3D::identity(),
        }
    }

    /// Largest weight norm, a measure of the non-affine part.
    pub fn max_weight_norm(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt())
            .fold(0.0, f64::max)
    }
}

impl Transform for TpsTransform {
    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = self.affine.apply(p);
        for (c, w) in self.control_pts.iter().zip(&self.weights) {
            let u = dist(p, *c);
            out[0] += w[0] * u;
            out[1] += w[1] * u;
            out[2] += w[2] * u;
        }
        out
    }
}

/// Fits the interpolating spline mapping each active `moving_pt` onto its
/// `fixed_pt`.
pub fn tps_fit(lms: &LandmarkSet) -> Result<TpsTransform> {
    tps_fit_regularized(lms, 0.0)
}

/// Approximate inverse: the spline fitted with moving and fixed roles swapped.
pub fn tps_inverse(lms: &LandmarkSet) -> Result<TpsTransform> {
    tps_fit(&lms.swapped())
}

pub fn tps_fit_regularized(lms: &LandmarkSet, lambda: f64) -> Result<TpsTransform> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let (src, dst): (Vec<[f64; 3]>, Vec<[f64; 3]>) = lms
        .active()
        .map(|l| (l.moving_pt, l.fixed_pt))
        .unzip();
    fit_points(&src, &dst, lambda)
}

pub(crate) fn fit_points(src: &[[f64; 3]], dst: &[[f64; 3]], lambda: f64) -> Result<TpsTransform> {
    let n = src.len();
    if n < 4 {
        return Err(Error::InsufficientLandmarks { needed: 4, got: n });
    }
    check_geometry(src)?;

    let m = n + 4;
    let mut a = DMatrix::<f64>::zeros(m, m);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = dist(src[i], src[j]);
        }
        a[(i, i)] += lambda;
        let row = [1.0, src[i][0], src[i][1], src[i][2]];
        for (k, v) in row.iter().enumerate() {
            a[(i, n + k)] = *v;
            a[(n + k, i)] = *v;
        }
    }
    let mut b = DMatrix::<f64>::zeros(m, 3);
    for i in 0..n {
        for d in 0..3 {
            b[(i, d)] = dst[i][d];
        }
    }
    let sol = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::DegenerateLandmarks("singular spline system".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateLandmarks("non-finite spline coefficients".into()));
    }
    let weights = (0..n)
        .map(|i| [sol[(i, 0)], sol[(i, 1)], sol[(i, 2)]])
        .collect();
    let mut affine = AffineTransform3D::identity();
    for d in 0..3 {
        affine.translation[d] = sol[(n, d)];
        for c in 0..3 {
            affine.matrix[d][c] = sol[(n + 1 + c, d)];
        }
    }
    Ok(TpsTransform {
        control_pts: src.to_vec(),
        weights,
        affine,
    })
}

/// Rejects duplicate and coplanar control points, both of which make the
/// spline system singular.
fn check_geometry(pts: &[[f64; 3]]) -> Result<()> {
    let n = pts.len() as f64;
    let mut mean = [0.0; 3];
    for p in pts {
        for d in 0..3 {
            mean[d] += p[d] / n;
        }
    }
    let mut scatter = Matrix3::<f64>::zeros();
    for p in pts {
        let c = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for r in 0..3 {
            for s in 0..3 {
                scatter[(r, s)] += c[r] * c[s];
            }
        }
    }
    let eig = scatter.symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min().max(0.0);
    if !(max > 0.0) || (min / max).sqrt() < 1e-8 {
        return Err(Error::DegenerateLandmarks(
            "control points are coplanar".into(),
        ));
    }
    let scale = max.sqrt();
    for i in 0..pts.len() {
        for j in 0..i {
            if dist(pts[i], pts[j]) <= 1e-12 * scale {
                return Err(Error::DegenerateLandmarks(format!(
                    "control points {j} and {i} coincide"
                )));
            }
        }
    }
    Ok(())
}
