//! Geometric transforms between physical spaces.
//!
//! All transforms follow the pull-back convention used for resampling: a
//! transform maps a point of the *target* grid to the location in the source
//! volume whose intensity it receives.

mod affine;
mod field;
mod landmarks;
mod tps;

pub use affine::{affine_is_singular, AffineTransform3D, DEFAULT_SINGULAR_TOL};
pub use field::{rasterize_field, resample, AffineWithField, DeformationField};
pub use landmarks::{Landmark, LandmarkSet};
pub use tps::{tps_fit, tps_fit_regularized, tps_inverse, TpsTransform};

/// A map from physical points to physical points (µm).
pub trait Transform: Sync {
    fn apply(&self, p: [f64; 3]) -> [f64; 3];
}

/// Identity map.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Transform for Identity {
    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        p
    }
}

impl<T: Transform + ?Sized> Transform for &T {
    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        (**self).apply(p)
    }
}

impl<T: Transform + ?Sized + Send> Transform for Box<T> {
    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        (**self).apply(p)
    }
}

#[inline]
pub(crate) fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}
