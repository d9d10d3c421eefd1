//! Multi-resolution affine registration over 12 parameters.
//!
//! The affine is written around the fixed-image centre `c` as
//! `T(x) = M (x - c) + c + t`. Optimisation runs on scaled parameters: a unit
//! change of a translation moves the image by one level voxel, and a unit
//! change of `M_ij` moves points at the half-extent along axis `j` by one
//! level voxel along axis `i`.

use super::optim::{build_pyramid, descend, DescentConfig, Level, Norm};
use super::{CostKind, FailureReason, RegistrationOptions, RegistrationResult, Stage};
use crate::error::Result;
use crate::volume::Volume;
use crate::xform::{affine_is_singular, AffineTransform3D, Transform, DEFAULT_SINGULAR_TOL};

struct Scaling {
    center: [f64; 3],
    /// `scale[p]` converts scaled parameter `p` into its natural unit.
    scale: [f64; 12],
}

impl Scaling {
    fn new(fixed: &Volume, unit: [f64; 3]) -> Self {
        let g = fixed.geometry();
        let e = g.extent();
        let center = g.center();
        let mut scale = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                let half = (0.5 * e[j]).max(g.spacing[j]);
                scale[3 * i + j] = unit[i] / half;
            }
            scale[9 + i] = unit[i];
        }
        Scaling { center, scale }
    }

    fn to_scaled(&self, a: &AffineTransform3D) -> Vec<f64> {
        let t = a.apply(self.center);
        let mut p = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                p[3 * i + j] = a.matrix[i][j] / self.scale[3 * i + j];
            }
            p[9 + i] = (t[i] - self.center[i]) / self.scale[9 + i];
        }
        p
    }

    fn to_affine(&self, p: &[f64]) -> AffineTransform3D {
        let c = self.center;
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = p[3 * i + j] * self.scale[3 * i + j];
            }
        }
        let mut translation = [0.0; 3];
        for i in 0..3 {
            let mc = m[i][0] * c[0] + m[i][1] * c[1] + m[i][2] * c[2];
            translation[i] = c[i] + p[9 + i] * self.scale[9 + i] - mc;
        }
        AffineTransform3D::new(m, translation)
    }
}

fn level_cost(level: &Level, a: &AffineTransform3D) -> f64 {
    level.cost_of(|i| a.apply(level.points[i]))
}

/// Registers `moving` onto `fixed`. The returned affine maps fixed-space
/// points to the moving-space points whose intensity they receive.
pub fn register_affine(
    fixed: &Volume,
    moving: &Volume,
    cost: CostKind,
    opts: &RegistrationOptions,
    init: &AffineTransform3D,
) -> Result<RegistrationResult> {
    opts.validate()?;
    let mut result = RegistrationResult {
        affine: *init,
        field: None,
        final_cost: f64::NAN,
        cost_trace: Vec::new(),
        failed: false,
        failure_reason: None,
        cost,
        options: opts.clone(),
    };
    if !init.is_finite() || affine_is_singular(init, DEFAULT_SINGULAR_TOL) {
        result.failed = true;
        result.failure_reason = Some(FailureReason::SingularAffine);
        return Ok(result);
    }
    let pyramid = build_pyramid(fixed, moving, cost, opts)?;
    let mut affine = *init;
    let mut non_converged = false;
    for (l, level) in pyramid.iter().enumerate() {
        let unit = level.fixed.spacing();
        let scaling = Scaling::new(fixed, unit);
        let mut params = scaling.to_scaled(&affine);
        let h = opts.fd_step;
        let cfg = DescentConfig {
            stage: Stage::Affine,
            level: l,
            max_iters: opts.max_iters_per_level,
            step_init: opts.step_init,
            step_shrink: opts.step_shrink,
            step_grow: opts.step_grow,
            min_step: opts.min_step,
            converge_tol: opts.converge_tol,
            norm: Norm::L2,
        };
        let run = descend(
            &mut params,
            &cfg,
            |p| level_cost(level, &scaling.to_affine(p)),
            |p| {
                let mut q = p.to_vec();
                (0..12)
                    .map(|k| {
                        q[k] = p[k] + h;
                        let up = level_cost(level, &scaling.to_affine(&q));
                        q[k] = p[k] - h;
                        let down = level_cost(level, &scaling.to_affine(&q));
                        q[k] = p[k];
                        (up - down) / (2.0 * h)
                    })
                    .collect()
            },
            &mut result.cost_trace,
        );
        affine = scaling.to_affine(&params);
        result.final_cost = run.cost;
        if !run.converged && run.last_rel_change > 100.0 * opts.converge_tol {
            non_converged = true;
        }
        log::debug!(
            "affine level {l} (factor {}): cost {} converged {}",
            level.factor,
            run.cost,
            run.converged
        );
    }
    result.affine = affine;
    if !affine.is_finite() || affine_is_singular(&affine, DEFAULT_SINGULAR_TOL) {
        result.failed = true;
        result.failure_reason = Some(FailureReason::SingularAffine);
    } else if non_converged {
        result.failed = true;
        result.failure_reason = Some(FailureReason::NonConvergence);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    #[test]
    fn scaling_roundtrip() {
        let g = Geometry::new([10, 8, 6], [1.0, 1.0, 2.0], [3.0, 0.0, -1.0]).unwrap();
        let v = Volume::filled(g, 0.0);
        let s = Scaling::new(&v, [2.0, 2.0, 4.0]);
        let a = AffineTransform3D::new(
            [[1.1, 0.02, 0.0], [-0.03, 0.95, 0.1], [0.0, 0.01, 1.0]],
            [1.0, -2.0, 0.5],
        );
        let b = s.to_affine(&s.to_scaled(&a));
        for i in 0..3 {
            assert!((b.translation[i] - a.translation[i]).abs() < 1e-12);
            for j in 0..3 {
                assert!((b.matrix[i][j] - a.matrix[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_matrix_init_fails_immediately() {
        let g = Geometry::new([8, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::from_fn(g, |i, j, k| (i + j + k) as f64);
        let init = AffineTransform3D::new([[0.0; 3]; 3], [0.0; 3]);
        let r = register_affine(&v, &v, CostKind::Ssd, &RegistrationOptions::default(), &init).unwrap();
        assert!(r.failed);
        assert_eq!(r.failure_reason, Some(FailureReason::SingularAffine));
        assert!(r.cost_trace.is_empty());
    }
}
