//! Synthetic template/subject pairs with known warps, intensity maps and
//! landmarks.
//!
//! The template is a sum of anisotropic Gaussian blobs. A smooth random
//! thin-plate-spline warp carries subject-grid points into template space;
//! the subject is the warped template pushed through a gamma curve plus
//! Gaussian noise, sampled on a coarser, anisotropic grid.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{save_volume, write_atomic};
use crate::rng;
use crate::synth::{compute_bins, make_label_volume};
use crate::volume::{rescale_intensity, Geometry, Volume};
use crate::xform::{resample, tps_fit, Landmark, LandmarkSet, Transform, TpsTransform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub seed: u64,
    /// Seed of the template alone, so a suite of pairs can share one
    /// template. Defaults to `seed`.
    pub template_seed: Option<u64>,
    pub template_dims: [usize; 3],
    pub template_spacing_um: [f64; 3],
    pub subject_spacing_um: [f64; 3],
    pub n_blobs: usize,
    /// Largest control-point displacement of the true warp.
    pub warp_magnitude_um: f64,
    pub gamma: f64,
    pub gain: f64,
    pub offset: f64,
    /// Standard deviation of additive noise, in 0..255 intensity units.
    pub noise_sigma: f64,
    pub n_landmarks: usize,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            seed: 0,
            template_seed: None,
            template_dims: [64, 64, 32],
            template_spacing_um: [1.0; 3],
            subject_spacing_um: [0.86, 0.86, 5.0],
            n_blobs: 25,
            warp_magnitude_um: 6.0,
            gamma: 2.0,
            gain: 1.0,
            offset: 0.0,
            noise_sigma: 5.0,
            n_landmarks: 30,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        Geometry::new(self.template_dims, self.template_spacing_um, [0.0; 3])?;
        Geometry::new([1; 3], self.subject_spacing_um, [0.0; 3])?;
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Parameter(format!("gamma must be > 0, got {}", self.gamma)));
        }
        for (name, v) in [
            ("warp_magnitude_um", self.warp_magnitude_um),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.gain.is_finite() || !self.offset.is_finite() {
            return Err(Error::Parameter("gain and offset must be finite".into()));
        }
        if self.n_blobs == 0 {
            return Err(Error::Parameter("n_blobs must be >= 1".into()));
        }
        if self.n_landmarks < 5 {
            return Err(Error::Parameter("n_landmarks must be >= 5".into()));
        }
        Ok(())
    }

    pub fn template_geometry(&self) -> Geometry {
        Geometry {
            dims: self.template_dims,
            spacing: self.template_spacing_um,
            origin: [0.0; 3],
        }
    }

    /// Subject grid covering the template extent.
    pub fn subject_geometry(&self) -> Geometry {
        let e = self.template_geometry().extent();
        let s = self.subject_spacing_um;
        Geometry {
            dims: [0, 1, 2].map(|a| (e[a] / s[a] + 1e-9).floor() as usize + 1),
            spacing: s,
            origin: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug)]
pub struct PhantomPair {
    pub params: PhantomParams,
    pub template: Volume,
    pub subject: Volume,
    /// Maps subject-grid points to the template points they were drawn from.
    pub true_transform: TpsTransform,
    /// Moving points on the subject, fixed points in the template.
    pub landmarks: LandmarkSet,
    /// Decile classes of the warped template on the subject grid.
    pub true_label_volume: Volume,
}

// Stream keys for the independent random components.
const TEMPLATE_STREAM: u64 = 0x5445_4d50_4c41_5445;
const WARP_STREAM: u64 = 0x5741_5250_0000_0001;
const NOISE_STREAM: u64 = 0x4e4f_4953_4500_0002;

/// `a (max(v, 0) / 255)^g 255 + b`. Exactly the identity for `g = a = 1`,
/// `b = 0`.
pub fn apply_intensity_map(v: &Volume, g: f64, a: f64, b: f64) -> Result<Volume> {
    if !(g > 0.0 && g.is_finite()) {
        return Err(Error::Parameter(format!("gamma must be > 0, got {g}")));
    }
    if g == 1.0 && a == 1.0 && b == 0.0 {
        return Ok(v.clone());
    }
    Ok(v.map(|x| a * (x.max(0.0) / 255.0).powf(g) * 255.0 + b))
}

/// Sum of random anisotropic Gaussian blobs rescaled to `[0, 255]`.
pub fn generate_template(p: &PhantomParams) -> Result<Volume> {
    let geom = p.template_geometry();
    geom.validate()?;
    let mut r = rng::stream(p.template_seed.unwrap_or(p.seed), TEMPLATE_STREAM);
    let e = geom.extent();
    let blobs: Vec<([f64; 3], [f64; 3], f64)> = (0..p.n_blobs)
        .map(|_| {
            let c = [0, 1, 2].map(|a| geom.origin[a] + r.random_range(0.1..0.9) * e[a]);
            let s = [0, 1, 2].map(|_| r.random_range(3.0..8.0));
            let amp = r.random_range(0.3..1.0);
            (c, s, amp)
        })
        .collect();
    let raw = Volume::from_fn(geom, |i, j, k| {
        let x = geom.voxel_center(i, j, k);
        blobs.iter().fold(0.0, |acc, (c, s, amp)| {
            let q: f64 = (0..3).map(|a| ((x[a] - c[a]) / s[a]).powi(2)).sum();
            acc + amp * (-0.5 * q).exp()
        })
    });
    rescale_intensity(&raw, 0.0, 255.0)
}

/// Smooth random displacement field with values bounded by `magnitude`:
/// a few low-frequency cosines per component.
struct SmoothWarp {
    waves: Vec<[([f64; 3], f64, f64); 3]>,
    magnitude: f64,
}

impl SmoothWarp {
    fn new(r: &mut rng::Rng, extent: [f64; 3], magnitude: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                [0, 1, 2].map(|_| {
                    let k = [0, 1, 2].map(|a| {
                        let cycles = r.random_range(0.3..1.0);
                        std::f64::consts::TAU * cycles / extent[a].max(1.0)
                    });
                    let phase = r.random_range(0.0..std::f64::consts::TAU);
                    let amp = r.random_range(-1.0..1.0);
                    (k, phase, amp)
                })
            })
            .collect();
        SmoothWarp { waves, magnitude }
    }

    /// Unit-bounded raw displacement.
    fn raw(&self, p: [f64; 3]) -> [f64; 3] {
        let mut d = [0.0; 3];
        for (w, comp) in self.waves.iter().zip(d.iter_mut()) {
            *comp = w
                .iter()
                .map(|(k, phase, amp)| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
                .sum::<f64>()
                / 3.0;
        }
        d
    }

    /// Displacements at `pts`, scaled so the largest has norm `magnitude`.
    fn at(&self, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let raw: Vec<[f64; 3]> = pts.iter().map(|&p| self.raw(p)).collect();
        let max = raw
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
            .fold(0.0, f64::max);
        let s = if max > 0.0 { self.magnitude / max } else { 0.0 };
        raw.iter().map(|d| d.map(|v| v * s)).collect()
    }
}

/// Random control points inside the central 80% of the subject domain,
/// displaced by a smooth field; the spline through them is the true warp.
fn true_warp(p: &PhantomParams, subject: &Geometry) -> Result<(Vec<[f64; 3]>, TpsTransform)> {
    let mut r = rng::stream(p.seed, WARP_STREAM);
    let e = subject.extent();
    let pts: Vec<[f64; 3]> = (0..p.n_landmarks)
        .map(|_| [0, 1, 2].map(|a| subject.origin[a] + r.random_range(0.1..0.9) * e[a]))
        .collect();
    let warp = SmoothWarp::new(&mut r, e, p.warp_magnitude_um);
    let disp = warp.at(&pts);
    let lms = LandmarkSet::new(
        pts.iter()
            .zip(&disp)
            .enumerate()
            .map(|(i, (c, d))| Landmark::new(format!("Pt-{i}"), *c, [c[0] + d[0], c[1] + d[1], c[2] + d[2]]))
            .collect(),
    )?;
    Ok((pts, tps_fit(&lms)?))
}

/// Builds a full pair. Deterministic in `p`.
pub fn generate_phantom(p: &PhantomParams) -> Result<PhantomPair> {
    p.validate()?;
    let template = generate_template(p)?;
    generate_phantom_with_template(p, template)
}

/// As [`generate_phantom`] with a precomputed template (for suites sharing
/// one template).
pub fn generate_phantom_with_template(p: &PhantomParams, template: Volume) -> Result<PhantomPair> {
    p.validate()?;
    if template.geometry() != &p.template_geometry() {
        return Err(Error::GridMismatch("template does not match the phantom parameters".into()));
    }
    let sgeom = p.subject_geometry();
    let (pts, tps) = true_warp(p, &sgeom)?;
    let landmarks = LandmarkSet::new(
        pts.iter()
            .enumerate()
            .map(|(i, &c)| Landmark::new(format!("Pt-{i}"), c, tps.apply(c)))
            .collect(),
    )?;
    let warped = resample(&template, &tps, &sgeom)?;
    let mapped = apply_intensity_map(&warped, p.gamma, p.gain, p.offset)?;
    let subject = if p.noise_sigma > 0.0 {
        let mut r = rng::stream(p.seed, NOISE_STREAM);
        let normal = Normal::new(0.0, p.noise_sigma)
            .map_err(|e| Error::Parameter(format!("noise: {e}")))?;
        let data = mapped.data().iter().map(|v| v + normal.sample(&mut r)).collect();
        mapped.with_data(data)?
    } else {
        mapped
    };
    let all = Volume::filled(sgeom, 1.0);
    let bins = compute_bins(&warped, &all)?;
    let true_label_volume = make_label_volume(&warped, &bins, &all)?;
    Ok(PhantomPair {
        params: p.clone(),
        template,
        subject,
        true_transform: tps,
        landmarks,
        true_label_volume,
    })
}

/// Pairs sharing `base`'s template, one per gamma, with seeds `base.seed + i + 1`.
pub fn generate_suite(base: &PhantomParams, gammas: &[f64]) -> Result<Vec<PhantomPair>> {
    let shared = PhantomParams {
        template_seed: Some(base.template_seed.unwrap_or(base.seed)),
        ..base.clone()
    };
    let template = generate_template(&shared)?;
    gammas
        .par_iter()
        .enumerate()
        .map(|(i, &g)| {
            let p = PhantomParams {
                seed: base.seed.wrapping_add(i as u64 + 1),
                gamma: g,
                ..shared.clone()
            };
            generate_phantom_with_template(&p, template.clone())
        })
        .collect()
}

impl PhantomPair {
    /// Writes `<stem>_template.nrrd`, `<stem>_subject.nrrd`,
    /// `<stem>_landmarks.csv`, `<stem>_labels.nrrd` and `<stem>_params.toml`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        save_volume(&self.template, dir.join(format!("{stem}_template.nrrd")))?;
        save_volume(&self.subject, dir.join(format!("{stem}_subject.nrrd")))?;
        save_volume(&self.true_label_volume, dir.join(format!("{stem}_labels.nrrd")))?;
        self.landmarks.write_csv(dir.join(format!("{stem}_landmarks.csv")))?;
        let toml = toml::to_string(&self.params)
            .map_err(|e| Error::Parameter(format!("cannot serialise phantom params: {e}")))?;
        write_atomic(&dir.join(format!("{stem}_params.toml")), toml.as_bytes())
    }
}
