//! Decile intensity classes and voxel-wise contrast synthesis.
//!
//! Training labels come from the template resampled into subject space and
//! binned at every 10th percentile of its masked intensities. A trained
//! ensemble then predicts a class for every subject voxel, and the synthetic
//! image carries the median template intensity of that class.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::TreeEnsemble;
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureSpec, FOREGROUND_THRESHOLD};
use crate::io::write_atomic;
use crate::volume::Volume;
use crate::xform::{tps_fit, LandmarkSet, Transform};

pub const DEFAULT_N_BINS: usize = 10;

/// Class boundaries and the intensity each class is rendered with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSpec {
    /// `n + 1` non-decreasing edges; the first is the minimum and the last
    /// the maximum of the binned values.
    pub edges: Vec<f64>,
    /// Median intensity inside each bin.
    pub representative: Vec<f64>,
}

impl BinSpec {
    pub fn n_bins(&self) -> usize {
        self.representative.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.representative.len();
        if n == 0 || self.edges.len() != n + 1 {
            return Err(Error::Parameter(format!(
                "bin spec needs n + 1 edges for n representatives, got {} and {n}",
                self.edges.len()
            )));
        }
        if self.edges.iter().chain(&self.representative).any(|v| !v.is_finite()) {
            return Err(Error::Parameter("bin spec values must be finite".into()));
        }
        if self.edges.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Parameter("bin edges must be non-decreasing".into()));
        }
        for (k, r) in self.representative.iter().enumerate() {
            if *r < self.edges[k] || *r > self.edges[k + 1] {
                return Err(Error::Parameter(format!(
                    "representative {k} = {r} lies outside its bin"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self)
            .map_err(|e| Error::Parameter(format!("cannot serialise bins: {e}")))?;
        write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bins: BinSpec = toml::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))?;
        bins.validate().map_err(|e| Error::corrupt(path, e.to_string()))?;
        Ok(bins)
    }
}

/// Template intensities pulled into subject space, with the voxels usable
/// for training.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub subject: Volume,
    pub template_in_subject: Volume,
    /// 1 where the subject is foreground and the pulled location lies inside
    /// the template, 0 elsewhere.
    pub mask: Volume,
}

/// Resamples `template` onto the subject grid through the spline fitted on
/// `lms` (moving = subject, fixed = template).
pub fn make_training_pair(subject: &Volume, template: &Volume, lms: &LandmarkSet) -> Result<TrainingPair> {
    let t = tps_fit(lms)?;
    let geom = *subject.geometry();
    let tgeom = *template.geometry();
    let [nx, ny, _] = geom.dims;
    let pulled: Vec<(f64, bool)> = (0..geom.len())
        .into_par_iter()
        .map(|idx| {
            let p = t.apply(geom.voxel_center(idx % nx, (idx / nx) % ny, idx / (nx * ny)));
            (template.sample_trilinear(p), tgeom.contains(p))
        })
        .collect();
    let warped = pulled.iter().map(|(v, _)| *v).collect();
    let mask = pulled
        .iter()
        .zip(subject.data())
        .map(|(&(_, inside), &s)| if inside && s > FOREGROUND_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Ok(TrainingPair {
        subject: subject.clone(),
        template_in_subject: Volume::from_geometry(geom, warped)?,
        mask: Volume::from_geometry(geom, mask)?,
    })
}

fn masked_values(v: &Volume, mask: &Volume) -> Result<Vec<f64>> {
    if v.geometry() != mask.geometry() {
        return Err(Error::GridMismatch("mask is not on the volume grid".into()));
    }
    Ok(v.data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m > 0.5)
        .map(|(&x, _)| x)
        .collect())
}

/// Decile bins over the masked voxels of one volume.
pub fn compute_bins(template_in_subject: &Volume, mask: &Volume) -> Result<BinSpec> {
    compute_bins_pooled(&[(template_in_subject, mask)], DEFAULT_N_BINS)
}

/// Bins over the masked voxels of several volumes pooled together.
pub fn compute_bins_pooled(pairs: &[(&Volume, &Volume)], n_bins: usize) -> Result<BinSpec> {
    let mut values = Vec::new();
    for (v, m) in pairs {
        values.extend(masked_values(v, m)?);
    }
    bins_from_values(values, n_bins)
}

/// Nearest-rank edges `e_k = sorted[ceil(k N / n) - 1]` and lower-median
/// representatives of `[e_k, e_{k+1})`, the last bin closed.
pub fn bins_from_values(mut values: Vec<f64>, n_bins: usize) -> Result<BinSpec> {
    if n_bins == 0 {
        return Err(Error::Parameter("bin count must be >= 1".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("binned intensities must be finite".into()));
    }
    values.sort_by(f64::total_cmp);
    let distinct = if values.is_empty() {
        0
    } else {
        1 + values.windows(2).filter(|w| w[1] != w[0]).count()
    };
    if distinct < n_bins {
        return Err(Error::DegenerateBins {
            distinct,
            needed: n_bins,
        });
    }
    let n = values.len();
    let edges: Vec<f64> = (0..=n_bins)
        .map(|k| {
            let rank = (k * n).div_ceil(n_bins).saturating_sub(1);
            values[rank.min(n - 1)]
        })
        .collect();
    let representative = (0..n_bins)
        .map(|k| {
            let lo = values.partition_point(|&v| v < edges[k]);
            let hi = if k + 1 == n_bins {
                n
            } else {
                values.partition_point(|&v| v < edges[k + 1])
            };
            if hi <= lo {
                edges[k]
            } else {
                let m = hi - lo;
                values[lo + m.div_ceil(2) - 1]
            }
        })
        .collect();
    Ok(BinSpec {
        edges,
        representative,
    })
}

/// Largest `k` with `edges[k] <= intensity`, clamped to the valid classes.
pub fn assign_class(intensity: f64, bins: &BinSpec) -> usize {
    let n = bins.n_bins();
    bins.edges[..n]
        .partition_point(|&e| e <= intensity)
        .saturating_sub(1)
}

/// Class per masked voxel; `-1` marks voxels outside the mask.
pub fn make_label_volume(template_in_subject: &Volume, bins: &BinSpec, mask: &Volume) -> Result<Volume> {
    if template_in_subject.geometry() != mask.geometry() {
        return Err(Error::GridMismatch("mask is not on the volume grid".into()));
    }
    let data = template_in_subject
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m > 0.5 { assign_class(v, bins) as f64 } else { -1.0 })
        .collect();
    template_in_subject.with_data(data)
}

/// Predicted class of every voxel of `subject`.
pub fn predict_classes(subject: &Volume, model: &TreeEnsemble, spec: &FeatureSpec) -> Result<Vec<usize>> {
    if model.feature_dim() != spec.len() {
        return Err(Error::DimMismatch {
            expected: model.feature_dim(),
            got: spec.len(),
        });
    }
    const BLOCK: usize = 8192;
    let extractor = FeatureExtractor::new(subject, spec)?;
    let geom = subject.geometry();
    let dim = spec.len();
    let n = subject.len();
    let blocks: Vec<Vec<usize>> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let range = b * BLOCK..((b + 1) * BLOCK).min(n);
            let mut rows = vec![0.0; range.len() * dim];
            for (idx, row) in range.zip(rows.chunks_exact_mut(dim)) {
                extractor.extract_into(geom.coords(idx), row);
            }
            model.predict_rows(&rows)
        })
        .collect::<Result<_>>()?;
    Ok(blocks.into_iter().flatten().collect())
}

/// Synthetic template-contrast image on the subject grid.
pub fn synthesize(subject: &Volume, model: &TreeEnsemble, spec: &FeatureSpec, bins: &BinSpec) -> Result<Volume> {
    bins.validate()?;
    if bins.n_bins() != model.n_classes() {
        return Err(Error::DimMismatch {
            expected: model.n_classes(),
            got: bins.n_bins(),
        });
    }
    let classes = predict_classes(subject, model, spec)?;
    subject.with_data(classes.into_iter().map(|c| bins.representative[c]).collect())
}
