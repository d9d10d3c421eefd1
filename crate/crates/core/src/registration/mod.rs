//! Intensity-based registration: SSD, NCC and MI costs, a multi-resolution
//! affine optimiser and an optional free-form deformation refinement.
//!
//! Registration maps the *fixed* grid into the *moving* image (pull-back):
//! the result transform sends a fixed-space point to the moving-space point
//! whose intensity it receives.

mod affine;
mod cost;
mod ffd;
mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use affine::register_affine;
pub use cost::{cost_mi, cost_ncc, cost_ssd, evaluate_cost, joint_histogram, CostKind, JointHistogram};
pub use ffd::register_deformable;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::volume::Volume;
use crate::xform::{AffineTransform3D, DeformationField, Transform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformableOptions {
    pub enabled: bool,
    pub control_spacing_um: [f64; 3],
    pub bending_weight: f64,
    pub max_iters_per_level: usize,
    /// Initial step as the largest control-point move, in level voxels.
    pub step_init: f64,
}

impl Default for DeformableOptions {
    fn default() -> Self {
        DeformableOptions {
            enabled: false,
            control_spacing_um: [8.0; 3],
            bending_weight: 1e-3,
            max_iters_per_level: 50,
            step_init: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationOptions {
    /// Pyramid depth; level `l` of `n` downsamples by `2^(n-1-l)`.
    pub levels: usize,
    pub max_iters_per_level: usize,
    /// Initial step length in scaled parameter units (about one level voxel).
    pub step_init: f64,
    pub step_shrink: f64,
    /// Growth after an accepted move, capped at `step_init`.
    pub step_grow: f64,
    /// A level stops once the step falls below this.
    pub min_step: f64,
    /// Relative cost change below which a level has converged.
    pub converge_tol: f64,
    /// Central-difference half-width in scaled parameter units.
    pub fd_step: f64,
    pub mi_bins: usize,
    pub deformable: DeformableOptions,
}

impl Default for RegistrationOptions {
    fn default() -> Self {
        RegistrationOptions {
            levels: 3,
            max_iters_per_level: 200,
            step_init: 1.0,
            step_shrink: 0.5,
            step_grow: 1.5,
            min_step: 1e-3,
            converge_tol: 1e-7,
            fd_step: 0.1,
            mi_bins: 32,
            deformable: DeformableOptions::default(),
        }
    }
}

impl RegistrationOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.levels == 0 || self.levels > 8 {
            return bad(format!("levels must be in [1, 8], got {}", self.levels));
        }
        for (name, v) in [
            ("step_init", self.step_init),
            ("min_step", self.min_step),
            ("fd_step", self.fd_step),
            ("converge_tol", self.converge_tol),
            ("deformable.step_init", self.deformable.step_init),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return bad(format!("step_shrink must be in (0, 1), got {}", self.step_shrink));
        }
        if !(self.step_grow >= 1.0 && self.step_grow.is_finite()) {
            return bad(format!("step_grow must be >= 1, got {}", self.step_grow));
        }
        if self.mi_bins < 2 {
            return bad(format!("mi_bins must be >= 2, got {}", self.mi_bins));
        }
        if self.deformable.control_spacing_um.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("control_spacing_um must be positive".into());
        }
        if !(self.deformable.bending_weight >= 0.0 && self.deformable.bending_weight.is_finite()) {
            return bad("bending_weight must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureReason {
    SingularAffine,
    NonConvergence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Affine,
    Deformable,
}

/// One accepted move (or the starting point, `iter = 0`) of a level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub stage: Stage,
    pub level: usize,
    pub iter: usize,
    pub cost: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub affine: AffineTransform3D,
    /// Displacement added after the affine, tabulated on the fixed grid.
    pub field: Option<DeformationField>,
    pub final_cost: f64,
    pub cost_trace: Vec<TraceEntry>,
    pub failed: bool,
    pub failure_reason: Option<FailureReason>,
    pub cost: CostKind,
    pub options: RegistrationOptions,
}

impl Transform for RegistrationResult {
    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut y = self.affine.apply(p);
        if let Some(f) = &self.field {
            let d = f.displacement_at(p);
            for c in 0..3 {
                y[c] += d[c];
            }
        }
        y
    }
}

/// Affine registration followed, when enabled, by deformable refinement.
/// Refinement is skipped for failed affine results.
pub fn register(
    fixed: &Volume,
    moving: &Volume,
    cost: CostKind,
    opts: &RegistrationOptions,
    init: &AffineTransform3D,
) -> Result<RegistrationResult> {
    let r = register_affine(fixed, moving, cost, opts, init)?;
    if opts.deformable.enabled && !r.failed {
        register_deformable(fixed, moving, cost, opts, &r)
    } else {
        Ok(r)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    cost: CostKind,
    final_cost: f64,
    failed: bool,
    failure_reason: Option<FailureReason>,
    has_field: bool,
    options: RegistrationOptions,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl RegistrationResult {
    pub fn affine_path(prefix: &Path) -> PathBuf {
        with_suffix(prefix, "_affine.txt")
    }

    pub fn sidecar_path(prefix: &Path) -> PathBuf {
        with_suffix(prefix, "_registration.toml")
    }

    pub fn trace_path(prefix: &Path) -> PathBuf {
        with_suffix(prefix, "_trace.csv")
    }

    pub fn field_prefix(prefix: &Path) -> PathBuf {
        with_suffix(prefix, "_field")
    }

    /// Writes `<prefix>_affine.txt` (three matrix rows, then the
    /// translation), `<prefix>_registration.toml`, `<prefix>_trace.csv` and,
    /// with a field, `<prefix>_field_{dx,dy,dz}.nrrd`.
    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let prefix = prefix.as_ref();
        let mut text = String::new();
        for row in &self.affine.matrix {
            let _ = writeln!(text, "{} {} {}", row[0], row[1], row[2]);
        }
        let t = self.affine.translation;
        let _ = writeln!(text, "{} {} {}", t[0], t[1], t[2]);
        write_atomic(&Self::affine_path(prefix), text.as_bytes())?;

        let sidecar = Sidecar {
            cost: self.cost,
            final_cost: self.final_cost,
            failed: self.failed,
            failure_reason: self.failure_reason,
            has_field: self.field.is_some(),
            options: self.options.clone(),
        };
        let toml = toml::to_string(&sidecar)
            .map_err(|e| Error::Parameter(format!("cannot serialise result: {e}")))?;
        write_atomic(&Self::sidecar_path(prefix), toml.as_bytes())?;

        let mut csv = String::from("stage,level,iter,cost,step\n");
        for e in &self.cost_trace {
            let stage = match e.stage {
                Stage::Affine => "affine",
                Stage::Deformable => "deformable",
            };
            let _ = writeln!(csv, "{stage},{},{},{},{}", e.level, e.iter, e.cost, e.step);
        }
        write_atomic(&Self::trace_path(prefix), csv.as_bytes())?;

        if let Some(f) = &self.field {
            f.save(Self::field_prefix(prefix))?;
        }
        Ok(())
    }

    pub fn load(prefix: impl AsRef<Path>) -> Result<Self> {
        let prefix = prefix.as_ref();
        let ap = Self::affine_path(prefix);
        let text = std::fs::read_to_string(&ap).map_err(|e| Error::io(&ap, e))?;
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::corrupt(&ap, format!("{e}")))?;
        if vals.len() != 12 {
            return Err(Error::corrupt(&ap, format!("expected 12 values, got {}", vals.len())));
        }
        let affine = AffineTransform3D::new(
            [
                [vals[0], vals[1], vals[2]],
                [vals[3], vals[4], vals[5]],
                [vals[6], vals[7], vals[8]],
            ],
            [vals[9], vals[10], vals[11]],
        );

        let sp = Self::sidecar_path(prefix);
        let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: Sidecar = toml::from_str(&text).map_err(|e| Error::corrupt(&sp, e.to_string()))?;

        let tp = Self::trace_path(prefix);
        let mut rdr = csv::Reader::from_path(&tp).map_err(|e| Error::corrupt(&tp, e.to_string()))?;
        let mut cost_trace = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::corrupt(&tp, e.to_string()))?;
            let bad = |what: &str| Error::corrupt(&tp, format!("bad {what} in trace"));
            if rec.len() != 5 {
                return Err(bad("row"));
            }
            cost_trace.push(TraceEntry {
                stage: match &rec[0] {
                    "affine" => Stage::Affine,
                    "deformable" => Stage::Deformable,
                    _ => return Err(bad("stage")),
                },
                level: rec[1].parse().map_err(|_| bad("level"))?,
                iter: rec[2].parse().map_err(|_| bad("iter"))?,
                cost: rec[3].parse().map_err(|_| bad("cost"))?,
                step: rec[4].parse().map_err(|_| bad("step"))?,
            });
        }
        let field = if side.has_field {
            Some(DeformationField::load(Self::field_prefix(prefix))?)
        } else {
            None
        };
        Ok(RegistrationResult {
            affine,
            field,
            final_cost: side.final_cost,
            cost_trace,
            failed: side.failed,
            failure_reason: side.failure_reason,
            cost: side.cost,
            options: side.options,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    #[test]
    fn result_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([3, 3, 2], [1.0, 1.0, 2.0], [0.0; 3]).unwrap();
        let r = RegistrationResult {
            affine: AffineTransform3D::new(
                [[1.0, 0.1, 0.0], [1.0 / 3.0, 1.0, 0.0], [0.0, 0.0, 0.9]],
                [0.5, -1e-7, 2.0],
            ),
            field: Some(DeformationField::new(g, (0..18).map(|i| [i as f64 * 0.1, 0.0, -0.3]).collect()).unwrap()),
            final_cost: -0.987654321,
            cost_trace: vec![
                TraceEntry { stage: Stage::Affine, level: 0, iter: 0, cost: 3.0, step: 1.0 },
                TraceEntry { stage: Stage::Deformable, level: 1, iter: 4, cost: 2.5, step: 0.25 },
            ],
            failed: true,
            failure_reason: Some(FailureReason::NonConvergence),
            cost: CostKind::Mi,
            options: RegistrationOptions::default(),
        };
        let prefix = dir.path().join("s1");
        r.save(&prefix).unwrap();
        assert_eq!(RegistrationResult::load(&prefix).unwrap(), r);
    }

    #[test]
    fn options_validation() {
        assert!(RegistrationOptions::default().validate().is_ok());
        let bad = RegistrationOptions { levels: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = RegistrationOptions { step_shrink: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = RegistrationOptions { mi_bins: 1, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
