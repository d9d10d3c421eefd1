//! Per-voxel feature vectors and training-set sampling.
//!
//! Two feature families are available:
//!
//! * `Patch`: raw intensities of a voxel neighbourhood, x-fastest then y then
//!   z, with zeros outside the volume.
//! * `MultiScale`: for each Gaussian scale σ (µm), the smoothed intensity, the
//!   gradient magnitude, the Laplacian and the largest-magnitude Hessian
//!   eigenvalue, all in physical units. Ordering is scale-major.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Matrix3;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::{gaussian_smooth, Volume};

/// Voxels of the preprocessed subject above this intensity (of 255) are
/// foreground for sampling.
pub const FOREGROUND_THRESHOLD: f64 = 1.0;

pub const MULTISCALE_FEATURES_PER_SCALE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Patch,
    #[serde(alias = "multiscale")]
    MultiScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    pub patch_dims: [usize; 3],
    pub scales_um: Vec<f64>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            kind: FeatureKind::Patch,
            patch_dims: [5, 5, 3],
            scales_um: vec![1.0, 2.0, 4.0],
        }
    }
}

impl FeatureSpec {
    pub fn patch(dims: [usize; 3]) -> Self {
        FeatureSpec {
            kind: FeatureKind::Patch,
            patch_dims: dims,
            ..Default::default()
        }
    }

    pub fn multiscale(scales_um: Vec<f64>) -> Self {
        FeatureSpec {
            kind: FeatureKind::MultiScale,
            scales_um,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            FeatureKind::Patch => {
                if self.patch_dims.iter().any(|&d| d == 0 || d % 2 == 0) {
                    return Err(Error::Parameter(format!(
                        "patch dims must be odd and >= 1, got {:?}",
                        self.patch_dims
                    )));
                }
            }
            FeatureKind::MultiScale => {
                if self.scales_um.is_empty()
                    || self.scales_um.iter().any(|s| !(*s > 0.0 && s.is_finite()))
                    || self.scales_um.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(Error::Parameter(format!(
                        "scales must be positive and ascending, got {:?}",
                        self.scales_um
                    )));
                }
            }
        }
        Ok(())
    }

    /// Length of every feature vector produced under this spec.
    pub fn len(&self) -> usize {
        match self.kind {
            FeatureKind::Patch => self.patch_dims.iter().product(),
            FeatureKind::MultiScale => MULTISCALE_FEATURES_PER_SCALE * self.scales_um.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Feature extraction bound to one volume. Multi-scale smoothing is done once
/// at construction.
pub enum FeatureExtractor<'a> {
    Patch {
        volume: &'a Volume,
        dims: [usize; 3],
    },
    MultiScale {
        smoothed: Vec<Volume>,
    },
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(v: &'a Volume, spec: &FeatureSpec) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            FeatureKind::Patch => FeatureExtractor::Patch {
                volume: v,
                dims: spec.patch_dims,
            },
            FeatureKind::MultiScale => FeatureExtractor::MultiScale {
                smoothed: spec
                    .scales_um
                    .iter()
                    .map(|&s| gaussian_smooth(v, [s; 3]))
                    .collect::<Result<_>>()?,
            },
        })
    }

    pub fn len(&self) -> usize {
        match self {
            FeatureExtractor::Patch { dims, .. } => dims.iter().product(),
            FeatureExtractor::MultiScale { smoothed } => {
                MULTISCALE_FEATURES_PER_SCALE * smoothed.len()
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extract(&self, voxel: [usize; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.extract_into(voxel, &mut out);
        out
    }

    pub fn extract_into(&self, voxel: [usize; 3], out: &mut [f64]) {
        match self {
            FeatureExtractor::Patch { volume, dims } => patch_into(volume, voxel, *dims, out),
            FeatureExtractor::MultiScale { smoothed } => {
                for (s, vol) in smoothed.iter().enumerate() {
                    let f = &mut out[s * MULTISCALE_FEATURES_PER_SCALE..][..MULTISCALE_FEATURES_PER_SCALE];
                    multiscale_at(vol, voxel, f);
                }
            }
        }
    }
}

fn patch_into(v: &Volume, voxel: [usize; 3], dims: [usize; 3], out: &mut [f64]) {
    let r = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let mut n = 0;
    for dz in 0..dims[2] {
        let k = voxel[2] as isize + dz as isize - r[2] as isize;
        for dy in 0..dims[1] {
            let j = voxel[1] as isize + dy as isize - r[1] as isize;
            for dx in 0..dims[0] {
                let i = voxel[0] as isize + dx as isize - r[0] as isize;
                out[n] = v.get_or_zero(i, j, k);
                n += 1;
            }
        }
    }
}

/// Raw-intensity patch around `voxel`.
pub fn extract_patch(v: &Volume, voxel: [usize; 3], spec: &FeatureSpec) -> Result<Vec<f64>> {
    if spec.kind != FeatureKind::Patch {
        return Err(Error::Parameter("extract_patch needs a Patch spec".into()));
    }
    spec.validate()?;
    let mut out = vec![0.0; spec.len()];
    patch_into(v, voxel, spec.patch_dims, &mut out);
    Ok(out)
}

/// Multi-scale filter responses at one voxel. Smooths the whole volume per
/// call; use [`FeatureExtractor`] when extracting many voxels.
pub fn extract_multiscale(v: &Volume, voxel: [usize; 3], spec: &FeatureSpec) -> Result<Vec<f64>> {
    if spec.kind != FeatureKind::MultiScale {
        return Err(Error::Parameter("extract_multiscale needs a MultiScale spec".into()));
    }
    Ok(FeatureExtractor::new(v, spec)?.extract(voxel))
}

/// Clamped neighbour indices along one axis and the physical distance between
/// them (0 when the axis has a single voxel).
#[inline]
fn neighbours(i: usize, n: usize, spacing: f64) -> (usize, usize, f64) {
    let lo = i.saturating_sub(1);
    let hi = (i + 1).min(n - 1);
    (lo, hi, (hi - lo) as f64 * spacing)
}

#[inline]
fn first_derivative(s: &Volume, p: [usize; 3], axis: usize) -> f64 {
    let (lo, hi, h) = neighbours(p[axis], s.dims()[axis], s.spacing()[axis]);
    if h == 0.0 {
        return 0.0;
    }
    let mut a = p;
    let mut b = p;
    a[axis] = lo;
    b[axis] = hi;
    (s.get(b[0], b[1], b[2]) - s.get(a[0], a[1], a[2])) / h
}

fn multiscale_at(s: &Volume, p: [usize; 3], out: &mut [f64]) {
    let dims = s.dims();
    let sp = s.spacing();
    let center = s.get(p[0], p[1], p[2]);
    let grad: Vec<f64> = (0..3).map(|a| first_derivative(s, p, a)).collect();
    let mut hess = Matrix3::<f64>::zeros();
    for a in 0..3 {
        if dims[a] > 1 {
            let mut lo = p;
            let mut hi = p;
            lo[a] = p[a].saturating_sub(1);
            hi[a] = (p[a] + 1).min(dims[a] - 1);
            hess[(a, a)] = (s.get(hi[0], hi[1], hi[2]) - 2.0 * center + s.get(lo[0], lo[1], lo[2]))
                / (sp[a] * sp[a]);
        }
        for b in (a + 1)..3 {
            let (lo, hi, h) = neighbours(p[a], dims[a], sp[a]);
            let v = if h == 0.0 {
                0.0
            } else {
                let mut pl = p;
                let mut ph = p;
                pl[a] = lo;
                ph[a] = hi;
                (first_derivative(s, ph, b) - first_derivative(s, pl, b)) / h
            };
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    let eig = hess.symmetric_eigenvalues();
    let mut largest = 0.0f64;
    for &e in eig.iter() {
        if e.abs() > largest.abs() {
            largest = e;
        }
    }
    out[0] = center;
    out[1] = (grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2]).sqrt();
    out[2] = hess.trace();
    out[3] = largest;
}

/// One subject's contribution to training: the preprocessed subject, its
/// class-label volume (negative = unlabelled) and a sampling mask.
#[derive(Clone, Debug)]
pub struct LabelledSubject {
    pub id: String,
    pub subject: Volume,
    pub labels: Volume,
    pub mask: Volume,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub spec: FeatureSpec,
    pub n_classes: usize,
    pub seed: u64,
    dim: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
    /// `(subject id, linear voxel index)` per sample.
    pub provenance: Vec<(String, usize)>,
}

impl TrainingSet {
    /// Assembles a training set from row-major features.
    pub fn from_rows(
        spec: FeatureSpec,
        n_classes: usize,
        rows: Vec<Vec<f64>>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or_else(|| spec.len());
        if rows.len() != labels.len() {
            return Err(Error::Parameter("features and labels differ in length".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        if labels.iter().any(|&l| l as usize >= n_classes) {
            return Err(Error::Parameter("label out of range".into()));
        }
        let features: Vec<f64> = rows.into_iter().flatten().collect();
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("features must be finite".into()));
        }
        Ok(TrainingSet {
            spec,
            n_classes,
            seed: 0,
            dim,
            features,
            labels,
            provenance: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn value(&self, i: usize, f: usize) -> f64 {
        self.features[i * self.dim + f]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    const MAGIC: &'static [u8; 4] = b"MSTS";
    const VERSION: u32 = 1;

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_u32::<LittleEndian>(Self::VERSION)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.n_classes as u32)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u8(match self.spec.kind {
            FeatureKind::Patch => 0,
            FeatureKind::MultiScale => 1,
        })?;
        for d in self.spec.patch_dims {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        w.write_u32::<LittleEndian>(self.spec.scales_um.len() as u32)?;
        for s in &self.spec.scales_um {
            w.write_f64::<LittleEndian>(*s)?;
        }
        for v in &self.features {
            w.write_f64::<LittleEndian>(*v)?;
        }
        w.write_all(&self.labels)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |e: std::io::Error| Error::corrupt("<training set>", e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != Self::MAGIC {
            return Err(Error::corrupt("<training set>", "bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(bad)?;
        if version != Self::VERSION {
            return Err(Error::Version {
                expected: Self::VERSION,
                found: version,
            });
        }
        let n = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let n_classes = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let seed = r.read_u64::<LittleEndian>().map_err(bad)?;
        let kind = match r.read_u8().map_err(bad)? {
            0 => FeatureKind::Patch,
            1 => FeatureKind::MultiScale,
            k => return Err(Error::corrupt("<training set>", format!("feature kind {k}"))),
        };
        let mut patch_dims = [0usize; 3];
        for d in patch_dims.iter_mut() {
            *d = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        }
        let n_scales = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let scales_um = (0..n_scales)
            .map(|_| r.read_f64::<LittleEndian>())
            .collect::<std::io::Result<_>>()
            .map_err(bad)?;
        let mut features = vec![0.0; n * dim];
        r.read_f64_into::<LittleEndian>(&mut features).map_err(bad)?;
        let mut labels = vec![0u8; n];
        r.read_exact(&mut labels).map_err(bad)?;
        Ok(TrainingSet {
            spec: FeatureSpec {
                kind,
                patch_dims,
                scales_um,
            },
            n_classes,
            seed,
            dim,
            features,
            labels,
            provenance: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .map_err(|e| Error::io(path.as_ref(), e))?;
        crate::io::write_atomic(path.as_ref(), &buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice()).map_err(|e| match e {
            Error::Corrupt { reason, .. } => Error::corrupt(path, reason),
            other => other,
        })
    }
}

/// Splits `n` across groups proportionally to `sizes` by largest remainder;
/// ties go to the earlier group.
pub(crate) fn proportional_split(n: usize, sizes: &[usize]) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut alloc: Vec<usize> = sizes
        .iter()
        .map(|&m| ((n as u128 * m as u128) / total as u128) as usize)
        .collect();
    let mut rem: Vec<(u128, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &m)| ((n as u128 * m as u128) % total as u128, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - alloc.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        alloc[i] += 1;
    }
    alloc
}

/// Draws `n` labelled voxels uniformly without replacement from the union of
/// masked voxels, allocated across subjects in proportion to their mask size.
pub fn sample_training(
    subjects: &[LabelledSubject],
    n: usize,
    spec: &FeatureSpec,
    n_classes: usize,
    seed: u64,
) -> Result<TrainingSet> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Parameter("sample count must be >= 1".into()));
    }
    let mut pools = Vec::with_capacity(subjects.len());
    for s in subjects {
        if s.labels.geometry() != s.subject.geometry() || s.mask.geometry() != s.subject.geometry() {
            return Err(Error::GridMismatch(format!(
                "labels/mask of {} are not on the subject grid",
                s.id
            )));
        }
        let pool: Vec<usize> = (0..s.subject.len())
            .filter(|&i| s.mask.data()[i] > 0.5 && s.labels.data()[i] >= 0.0)
            .collect();
        pools.push(pool);
    }
    let sizes: Vec<usize> = pools.iter().map(Vec::len).collect();
    let available: usize = sizes.iter().sum();
    if available < n {
        return Err(Error::InsufficientSamples {
            requested: n,
            available,
        });
    }
    let alloc = proportional_split(n, &sizes);
    let dim = spec.len();
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    let mut rng = rng::seeded(seed);
    for ((s, pool), &take) in subjects.iter().zip(&pools).zip(&alloc) {
        let mut picked: Vec<usize> = sample(&mut rng, pool.len(), take)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        picked.sort_unstable();
        let extractor = FeatureExtractor::new(&s.subject, spec)?;
        let mut row = vec![0.0; dim];
        for &idx in &picked {
            extractor.extract_into(s.subject.geometry().coords(idx), &mut row);
            features.extend_from_slice(&row);
            let label = s.labels.data()[idx];
            if label as usize >= n_classes {
                return Err(Error::Parameter(format!(
                    "label {label} at voxel {idx} of {} exceeds class count",
                    s.id
                )));
            }
            labels.push(label as u8);
            provenance.push((s.id.clone(), idx));
        }
    }
    Ok(TrainingSet {
        spec: spec.clone(),
        n_classes,
        seed,
        dim,
        features,
        labels,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn geom(d: [usize; 3], s: [f64; 3]) -> Geometry {
        Geometry::new(d, s, [0.0; 3]).unwrap()
    }

    #[test]
    fn patch_layout() {
        let g = geom([7, 7, 5], [1.0; 3]);
        let v = Volume::from_fn(g, |i, j, k| (i + 10 * j + 100 * k) as f64 + 1.0);
        let spec = FeatureSpec::default();
        let f = extract_patch(&v, [3, 3, 2], &spec).unwrap();
        assert_eq!(f.len(), 75);
        assert_eq!(f[37], v.get(3, 3, 2));
        assert_eq!(f[0], v.get(1, 1, 1));
        assert_eq!(f[1], v.get(2, 1, 1));
        assert_eq!(f[5], v.get(1, 2, 1));
        assert_eq!(f[25], v.get(1, 1, 2));
        let corner = extract_patch(&v, [0, 0, 0], &spec).unwrap();
        assert_eq!(corner[0], 0.0);
        assert_eq!(corner[37], v.get(0, 0, 0));
        assert_eq!(corner.iter().filter(|x| **x == 0.0).count(), 75 - 3 * 3 * 2);
    }

    #[test]
    fn constant_volume_features() {
        let g = geom([9, 9, 9], [1.0, 1.0, 2.0]);
        let v = Volume::filled(g, 42.0);
        let p = extract_patch(&v, [4, 4, 4], &FeatureSpec::default()).unwrap();
        assert!(p.iter().all(|x| *x == 42.0));
        let spec = FeatureSpec::multiscale(vec![1.0, 2.0, 4.0]);
        let m = extract_multiscale(&v, [4, 4, 4], &spec).unwrap();
        assert_eq!(m.len(), 12);
        for s in 0..3 {
            assert_eq!(m[4 * s], 42.0);
            assert_eq!(&m[4 * s + 1..4 * s + 4], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn ramp_gradient_is_unit() {
        let g = geom([80, 9, 5], [0.5, 1.0, 2.0]);
        let v = Volume::from_fn(g, |i, _, _| i as f64 * 0.5);
        let spec = FeatureSpec::multiscale(vec![1.0, 2.0, 4.0]);
        let m = extract_multiscale(&v, [40, 4, 2], &spec).unwrap();
        for s in 0..3 {
            assert!((m[4 * s + 1] - 1.0).abs() < 1e-6, "scale {s}: {}", m[4 * s + 1]);
            assert!(m[4 * s + 2].abs() < 1e-6);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(FeatureSpec::patch([4, 5, 3]).validate().is_err());
        assert!(FeatureSpec::multiscale(vec![2.0, 1.0]).validate().is_err());
        assert!(FeatureSpec::multiscale(vec![]).validate().is_err());
        assert_eq!(FeatureSpec::multiscale(vec![1.0, 2.0, 4.0]).len(), 12);
    }

    #[test]
    fn proportional_allocation() {
        assert_eq!(proportional_split(10, &[5, 5]), vec![5, 5]);
        assert_eq!(proportional_split(10, &[1, 2]), vec![3, 7]);
        assert_eq!(proportional_split(3, &[10, 10, 10]), vec![1, 1, 1]);
        assert_eq!(proportional_split(2, &[10, 10, 10]), vec![1, 1, 0]);
        assert_eq!(proportional_split(7, &[7, 0]), vec![7, 0]);
    }

    fn subject(id: &str, mask_count: usize) -> LabelledSubject {
        let g = geom([6, 5, 2], [1.0; 3]);
        let v = Volume::from_fn(g, |i, j, k| (i + j + k) as f64);
        let labels = Volume::from_fn(g, |i, _, _| (i % 10) as f64);
        let mut mask = Volume::filled(g, 0.0);
        for idx in 0..mask_count {
            let [i, j, k] = g.coords(idx);
            mask.set(i, j, k, 1.0);
        }
        LabelledSubject {
            id: id.into(),
            subject: v,
            labels,
            mask,
        }
    }

    #[test]
    fn exhaustive_and_insufficient_draws() {
        let subs = vec![subject("a", 20), subject("b", 13)];
        let ts = sample_training(&subs, 33, &FeatureSpec::patch([3, 3, 1]), 10, 4).unwrap();
        assert_eq!(ts.len(), 33);
        let mut prov = ts.provenance.clone();
        prov.sort();
        prov.dedup();
        assert_eq!(prov.len(), 33);
        assert!(matches!(
            sample_training(&subs, 34, &FeatureSpec::default(), 10, 4),
            Err(Error::InsufficientSamples {
                requested: 34,
                available: 33
            })
        ));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let subs = vec![subject("a", 50), subject("b", 40)];
        let spec = FeatureSpec::default();
        let a = sample_training(&subs, 30, &spec, 10, 9).unwrap();
        let b = sample_training(&subs, 30, &spec, 10, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_training(&subs, 30, &spec, 10, 10).unwrap();
        assert_ne!(a.provenance, c.provenance);
    }

    #[test]
    fn binary_roundtrip_and_truncation() {
        let subs = vec![subject("a", 50)];
        let ts = sample_training(&subs, 12, &FeatureSpec::default(), 10, 1).unwrap();
        let mut buf = Vec::new();
        ts.write_to(&mut buf).unwrap();
        let back = TrainingSet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.labels(), ts.labels());
        assert_eq!(back.row(3), ts.row(3));
        assert_eq!(back.spec, ts.spec);
        assert_eq!(back.seed, 1);
        buf.truncate(buf.len() - 5);
        assert!(matches!(
            TrainingSet::read_from(&mut buf.as_slice()),
            Err(Error::Corrupt { .. })
        ));
    }
}
