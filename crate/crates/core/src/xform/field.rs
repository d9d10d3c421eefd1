//! Dense displacement fields and transform-driven resampling.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{AffineTransform3D, Transform};
use crate::error::{Error, Result};
use crate::io::{load_volume, save_volume};
use crate::volume::{Geometry, Volume, LATTICE_EPS};

/// Per-voxel displacement vectors (µm) on a regular grid. As a transform it
/// maps `x ↦ x + d(x)` with trilinear interpolation of `d`; queries outside
/// the grid use the nearest edge value.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    geom: Geometry,
    displacements: Vec<[f64; 3]>,
}

impl DeformationField {
    pub fn new(geom: Geometry, displacements: Vec<[f64; 3]>) -> Result<Self> {
        geom.validate()?;
        if displacements.len() != geom.len() {
            return Err(Error::Parameter(format!(
                "field has {} vectors for dims {:?}",
                displacements.len(),
                geom.dims
            )));
        }
        if displacements.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("field displacements must be finite".into()));
        }
        Ok(DeformationField {
            geom,
            displacements,
        })
    }

    pub fn zeros(geom: Geometry) -> Self {
        DeformationField {
            displacements: vec![[0.0; 3]; geom.len()],
            geom,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn displacements(&self) -> &[[f64; 3]] {
        &self.displacements
    }

    /// Largest displacement magnitude.
    pub fn max_norm(&self) -> f64 {
        self.displacements
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn displacement_at(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.geom.continuous_index(p);
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut step = [0usize; 3];
        let strides = [1, self.geom.dims[0], self.geom.dims[0] * self.geom.dims[1]];
        for a in 0..3 {
            let n = self.geom.dims[a];
            let mut x = c[a];
            let r = x.round();
            if (x - r).abs() < LATTICE_EPS {
                x = r;
            }
            x = x.clamp(0.0, (n - 1) as f64);
            if n == 1 {
                continue;
            }
            let i0 = (x.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = x - i0 as f64;
            step[a] = strides[a];
        }
        let i000 = self.geom.index(base[0], base[1], base[2]);
        let d = &self.displacements;
        let [fx, fy, fz] = frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        let [sx, sy, sz] = step;
        let mut out = [0.0; 3];
        for (comp, o) in out.iter_mut().enumerate() {
            let v = |idx: usize| d[idx][comp];
            let c00 = v(i000) * gx + v(i000 + sx) * fx;
            let c10 = v(i000 + sy) * gx + v(i000 + sy + sx) * fx;
            let c01 = v(i000 + sz) * gx + v(i000 + sz + sx) * fx;
            let c11 = v(i000 + sz + sy) * gx + v(i000 + sz + sy + sx) * fx;
            *o = (c00 * gy + c10 * fy) * gz + (c01 * gy + c11 * fy) * fz;
        }
        out
    }

    fn component_path(prefix: &Path, suffix: &str) -> PathBuf {
        let mut s = prefix.as_os_str().to_owned();
        s.push(format!("_{suffix}.nrrd"));
        PathBuf::from(s)
    }

    /// Writes `<prefix>_dx.nrrd`, `<prefix>_dy.nrrd` and `<prefix>_dz.nrrd`.
    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<()> {
        for (comp, name) in ["dx", "dy", "dz"].iter().enumerate() {
            let data = self.displacements.iter().map(|d| d[comp]).collect();
            let v = Volume::from_geometry(self.geom, data)?;
            save_volume(&v, Self::component_path(prefix.as_ref(), name))?;
        }
        Ok(())
    }

    pub fn load(prefix: impl AsRef<Path>) -> Result<Self> {
        let comps: Vec<Volume> = ["dx", "dy", "dz"]
            .iter()
            .map(|n| load_volume(Self::component_path(prefix.as_ref(), n)))
            .collect::<Result<_>>()?;
        let geom = *comps[0].geometry();
        if comps.iter().any(|c| c.geometry() != &geom) {
            return Err(Error::corrupt(
                prefix.as_ref(),
                "field components disagree on geometry",
            ));
        }
        let displacements = (0..geom.len())
            .map(|i| [comps[0].data()[i], comps[1].data()[i], comps[2].data()[i]])
            .collect();
        DeformationField::new(geom, displacements)
    }
}

impl Transform for DeformationField {
    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let d = self.displacement_at(p);
        [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
    }
}

/// Affine map followed by an additive displacement defined on the target
/// grid: `x ↦ A(x) + d(x)`. This is the output form of deformable
/// registration.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineWithField {
    pub affine: AffineTransform3D,
    pub field: DeformationField,
}

impl Transform for AffineWithField {
    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let a = self.affine.apply(p);
        let d = self.field.displacement_at(p);
        [a[0] + d[0], a[1] + d[1], a[2] + d[2]]
    }
}

/// Pull-back resampling: every target voxel centre `x` receives
/// `src(t(x))`, trilinearly interpolated, 0 outside `src`.
pub fn resample<T: Transform + ?Sized>(src: &Volume, t: &T, target: &Geometry) -> Result<Volume> {
    target.validate()?;
    let geom = *target;
    let [nx, ny, _] = geom.dims;
    let data: Vec<f64> = (0..geom.len())
        .into_par_iter()
        .map(|idx| {
            let i = idx % nx;
            let j = (idx / nx) % ny;
            let k = idx / (nx * ny);
            src.sample_trilinear(t.apply(geom.voxel_center(i, j, k)))
        })
        .collect();
    Volume::from_geometry(geom, data)
}

/// Tabulates `t(x) - x` at every voxel centre of `geom`.
pub fn rasterize_field<T: Transform + ?Sized>(t: &T, geom: &Geometry) -> Result<DeformationField> {
    geom.validate()?;
    let g = *geom;
    let [nx, ny, _] = g.dims;
    let displacements = (0..g.len())
        .into_par_iter()
        .map(|idx| {
            let x = g.voxel_center(idx % nx, (idx / nx) % ny, idx / (nx * ny));
            let y = t.apply(x);
            [y[0] - x[0], y[1] - x[1], y[2] - x[2]]
        })
        .collect();
    DeformationField::new(g, displacements)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xform::Identity;

    fn ramp() -> Volume {
        let g = Geometry::new([6, 5, 4], [1.0, 2.0, 0.5], [0.0; 3]).unwrap();
        Volume::from_fn(g, |i, j, k| (i * 100 + j * 10 + k) as f64)
    }

    #[test]
    fn identity_resample_is_exact() {
        let v = ramp();
        let out = resample(&v, &Identity, v.geometry()).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn one_voxel_shift() {
        let v = ramp();
        let t = AffineTransform3D::translation([-1.0, 0.0, 0.0]);
        let out = resample(&v, &t, v.geometry()).unwrap();
        for k in 0..4 {
            for j in 0..5 {
                assert_eq!(out.get(0, j, k), 0.0);
                for i in 1..6 {
                    assert_eq!(out.get(i, j, k), v.get(i - 1, j, k));
                }
            }
        }
    }

    #[test]
    fn rasterized_fields() {
        let g = Geometry::new([4, 3, 2], [1.0, 1.0, 3.0], [0.5, 0.0, 0.0]).unwrap();
        let f = rasterize_field(&AffineTransform3D::identity(), &g).unwrap();
        assert_eq!(f.max_norm(), 0.0);
        let f = rasterize_field(&AffineTransform3D::translation([2.0, 0.0, 0.0]), &g).unwrap();
        assert!(f.displacements().iter().all(|d| *d == [2.0, 0.0, 0.0]));
    }

    #[test]
    fn bad_geometry_rejected() {
        let v = ramp();
        let g = Geometry {
            dims: [2, 2, 2],
            spacing: [1.0, 0.0, 1.0],
            origin: [0.0; 3],
        };
        assert!(matches!(resample(&v, &Identity, &g), Err(Error::Parameter(_))));
    }

    #[test]
    fn field_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([3, 2, 2], [1.0, 1.5, 2.0], [0.0; 3]).unwrap();
        let disp = (0..12).map(|i| [i as f64, -0.5 * i as f64, 0.1]).collect();
        let f = DeformationField::new(g, disp).unwrap();
        let prefix = dir.path().join("warp");
        f.save(&prefix).unwrap();
        assert!(dir.path().join("warp_dy.nrrd").exists());
        assert_eq!(DeformationField::load(&prefix).unwrap(), f);
    }
}
