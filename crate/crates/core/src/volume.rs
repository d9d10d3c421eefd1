//! 3D scalar volumes with physical voxel geometry and the preprocessing chain.
//!
//! Intensities are stored as `f64` in x-fastest order. Physical coordinates are
//! in µm: the centre of voxel `(i, j, k)` sits at `origin + (i, j, k) * spacing`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lattice positions closer than this (in voxel units) are snapped onto the
/// lattice so that transforms carrying rounding noise still hit stored values.
pub const LATTICE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Geometry {
            dims,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Parameter(format!(
                "dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Parameter("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    #[inline]
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Whether a physical point falls inside the sampling domain, i.e. within
    /// the hull of voxel centres.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let c = self.continuous_index(p);
        (0..3).all(|a| c[a] >= -LATTICE_EPS && c[a] <= (self.dims[a] - 1) as f64 + LATTICE_EPS)
    }

    /// Physical extent covered by voxel centres along each axis.
    pub fn extent(&self) -> [f64; 3] {
        [
            (self.dims[0] - 1) as f64 * self.spacing[0],
            (self.dims[1] - 1) as f64 * self.spacing[1],
            (self.dims[2] - 1) as f64 * self.spacing[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        let e = self.extent();
        [
            self.origin[0] + 0.5 * e[0],
            self.origin[1] + 0.5 * e[1],
            self.origin[2] + 0.5 * e[2],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geom: Geometry,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], data: Vec<f64>) -> Result<Self> {
        Self::from_geometry(Geometry::new(dims, spacing, origin)?, data)
    }

    pub fn from_geometry(geom: Geometry, data: Vec<f64>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::Parameter(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("volume intensities must be finite".into()));
        }
        Ok(Volume { geom, data })
    }

    pub fn filled(geom: Geometry, value: f64) -> Self {
        Volume {
            data: vec![value; geom.len()],
            geom,
        }
    }

    /// Builds a volume by evaluating `f` at every voxel index.
    pub fn from_fn(geom: Geometry, f: impl Fn(usize, usize, usize) -> f64 + Sync) -> Self {
        let [nx, ny, _] = geom.dims;
        let data = (0..geom.len())
            .into_par_iter()
            .map(|idx| {
                let i = idx % nx;
                let j = (idx / nx) % ny;
                let k = idx / (nx * ny);
                f(i, j, k)
            })
            .collect();
        Volume { geom, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geom.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geom.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.geom.index(i, j, k);
        self.data[idx] = v;
    }

    /// Signed-index lookup returning 0 outside the grid.
    #[inline]
    pub fn get_or_zero(&self, i: isize, j: isize, k: isize) -> f64 {
        let [nx, ny, nz] = self.geom.dims;
        if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
            0.0
        } else {
            self.get(i as usize, j as usize, k as usize)
        }
    }

    /// Same geometry, new data.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::from_geometry(self.geom, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Self {
        Volume {
            geom: self.geom,
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Trilinear sample at a physical point; 0 outside the voxel-centre hull.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f64 {
        let c = self.geom.continuous_index(p);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.geom.dims[a];
            let hi = (n - 1) as f64;
            let mut x = c[a];
            if !(x >= -LATTICE_EPS && x <= hi + LATTICE_EPS) {
                return 0.0;
            }
            let r = x.round();
            if (x - r).abs() < LATTICE_EPS {
                x = r;
            }
            x = x.clamp(0.0, hi);
            if n == 1 {
                base[a] = 0;
                frac[a] = 0.0;
                continue;
            }
            let i0 = (x.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = x - i0 as f64;
        }
        self.interpolate(base, frac)
    }

    #[inline]
    fn interpolate(&self, base: [usize; 3], frac: [f64; 3]) -> f64 {
        let [nx, ny, nz] = self.geom.dims;
        let sx = if nx > 1 { 1 } else { 0 };
        let sy = if ny > 1 { nx } else { 0 };
        let sz = if nz > 1 { nx * ny } else { 0 };
        let i000 = self.geom.index(base[0], base[1], base[2]);
        let d = &self.data;
        let [fx, fy, fz] = frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        let c00 = d[i000] * gx + d[i000 + sx] * fx;
        let c10 = d[i000 + sy] * gx + d[i000 + sy + sx] * fx;
        let c01 = d[i000 + sz] * gx + d[i000 + sz + sx] * fx;
        let c11 = d[i000 + sz + sy] * gx + d[i000 + sz + sy + sx] * fx;
        let c0 = c00 * gy + c10 * fy;
        let c1 = c01 * gy + c11 * fy;
        c0 * gz + c1 * fz
    }
}

/// Parameters of the clip → smooth → rescale chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessParams {
    pub clip_percentile: f64,
    pub smooth_sigma_um: [f64; 3],
    pub out_range: [f64; 2],
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            clip_percentile: 99.0,
            smooth_sigma_um: [1.5, 1.5, 1.5],
            out_range: [0.0, 255.0],
        }
    }
}

impl PreprocessParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_percentile > 0.0 && self.clip_percentile <= 100.0) {
            return Err(Error::Parameter(format!(
                "clip_percentile must be in (0, 100], got {}",
                self.clip_percentile
            )));
        }
        if self.smooth_sigma_um.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Parameter("smoothing sigma must be >= 0".into()));
        }
        if !(self.out_range[0] < self.out_range[1]) {
            return Err(Error::Parameter(format!(
                "out_range must be increasing, got {:?}",
                self.out_range
            )));
        }
        Ok(())
    }
}

/// Nearest-rank percentile: element `ceil(q/100 * N) - 1` of the sorted data.
pub fn percentile(v: &Volume, q: f64) -> f64 {
    percentile_of(v.data(), q)
}

pub(crate) fn percentile_of(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty data");
    let n = values.len();
    let rank = (q * n as f64 / 100.0).ceil() as i64 - 1;
    let idx = rank.clamp(0, n as i64 - 1) as usize;
    let mut buf = values.to_vec();
    let (_, nth, _) = buf.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    *nth
}

pub fn percentile_clip(v: &Volume, q: f64) -> Volume {
    let cap = percentile(v, q);
    v.map(|x| x.min(cap))
}

pub fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    if sigma_vox <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma_vox).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// Separable Gaussian smoothing with per-axis σ in µm and clamp-to-edge borders.
pub fn gaussian_smooth(v: &Volume, sigma_um: [f64; 3]) -> Result<Volume> {
    if sigma_um.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::Parameter(format!(
            "sigma must be finite and >= 0, got {sigma_um:?}"
        )));
    }
    let mut out = v.clone();
    for axis in 0..3 {
        let sigma_vox = sigma_um[axis] / v.spacing()[axis];
        if sigma_vox > 0.0 {
            out = convolve_axis(&out, axis, &gaussian_kernel(sigma_vox));
        }
    }
    Ok(out)
}

/// Convolves along one axis. Each output is written as the centre value plus a
/// weighted sum of differences so constants come through bit-exact, then
/// clamped to the window range against rounding.
fn convolve_axis(v: &Volume, axis: usize, kernel: &[f64]) -> Volume {
    let geom = *v.geometry();
    let dims = geom.dims;
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let radius = (kernel.len() / 2) as isize;
    let src = v.data();
    let data: Vec<f64> = (0..geom.len())
        .into_par_iter()
        .map(|idx| {
            let c = geom.coords(idx);
            let pos = c[axis] as isize;
            let line_start = idx - c[axis] * stride;
            let center = src[idx];
            let mut acc = 0.0;
            let mut lo = center;
            let mut hi = center;
            for (t, w) in kernel.iter().enumerate() {
                let q = (pos + t as isize - radius).clamp(0, n as isize - 1) as usize;
                let s = src[line_start + q * stride];
                acc += w * (s - center);
                lo = lo.min(s);
                hi = hi.max(s);
            }
            (center + acc).clamp(lo, hi)
        })
        .collect();
    Volume { geom, data }
}

/// Affine intensity map sending the current range onto `[out_lo, out_hi]`.
pub fn rescale_intensity(v: &Volume, out_lo: f64, out_hi: f64) -> Result<Volume> {
    if !(out_lo < out_hi) {
        return Err(Error::Parameter(format!(
            "rescale range must be increasing, got ({out_lo}, {out_hi})"
        )));
    }
    let (lo, hi) = v.min_max();
    if lo == hi {
        return Ok(v.map(|_| out_lo));
    }
    if lo == out_lo && hi == out_hi {
        return Ok(v.clone());
    }
    let span = hi - lo;
    Ok(v.map(|x| {
        let t = (x - lo) / span;
        (out_lo * (1.0 - t) + out_hi * t).clamp(out_lo, out_hi)
    }))
}

pub fn preprocess(v: &Volume, p: &PreprocessParams) -> Result<Volume> {
    p.validate()?;
    let clipped = percentile_clip(v, p.clip_percentile);
    let smoothed = gaussian_smooth(&clipped, p.smooth_sigma_um)?;
    rescale_intensity(&smoothed, p.out_range[0], p.out_range[1])
}

/// Downsamples by an integer factor per axis after the caller has smoothed.
/// Voxel `i` of the result sits at voxel `i * factor` of the source.
pub fn subsample(v: &Volume, factor: [usize; 3]) -> Volume {
    let g = v.geometry();
    let dims = [
        g.dims[0].div_ceil(factor[0]),
        g.dims[1].div_ceil(factor[1]),
        g.dims[2].div_ceil(factor[2]),
    ];
    let geom = Geometry {
        dims,
        spacing: [
            g.spacing[0] * factor[0] as f64,
            g.spacing[1] * factor[1] as f64,
            g.spacing[2] * factor[2] as f64,
        ],
        origin: g.origin,
    };
    Volume::from_fn(geom, |i, j, k| {
        v.get(i * factor[0], j * factor[1], k * factor[2])
    })
}
