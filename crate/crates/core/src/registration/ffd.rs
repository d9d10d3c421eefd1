//! Free-form deformation refinement on top of an affine registration.
//!
//! Displacements `d_k` live on a control grid with spacing
//! `control_spacing_um` anchored at the fixed-image origin and are spread to
//! points by first-order (trilinear) B-spline weights:
//! `T(x) = A(x) + Σ_k φ_k(x) d_k`. The objective is the image cost plus
//! `bending_weight` times the sum of squared second differences of the
//! control displacements along each grid axis, with the grid padded by zero
//! displacements so only the zero field has zero energy.

use rayon::prelude::*;

use super::optim::{build_pyramid, descend, DescentConfig, Level, Norm};
use super::{CostKind, RegistrationOptions, RegistrationResult, Stage};
use crate::error::{Error, Result};
use crate::volume::{Geometry, Volume};
use crate::xform::{AffineTransform3D, DeformationField, Transform};

#[derive(Clone, Debug)]
pub(crate) struct ControlGrid {
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub dims: [usize; 3],
}

impl ControlGrid {
    pub fn covering(g: &Geometry, spacing: [f64; 3]) -> Self {
        let e = g.extent();
        let dims = [0, 1, 2].map(|a| ((e[a] / spacing[a]).ceil() as usize + 1).max(2));
        ControlGrid {
            origin: g.origin,
            spacing,
            dims,
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Nodes with nonzero weight at `p`; at most 8.
    pub fn weights(&self, p: [f64; 3], out: &mut Vec<(usize, f64)>) {
        out.clear();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let c = ((p[a] - self.origin[a]) / self.spacing[a]).clamp(0.0, (self.dims[a] - 1) as f64);
            let i0 = (c.floor() as usize).min(self.dims[a] - 2);
            base[a] = i0;
            frac[a] = c - i0 as f64;
        }
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    let w = wx * wy * wz;
                    if w > 0.0 {
                        out.push((self.index(base[0] + dx, base[1] + dy, base[2] + dz), w));
                    }
                }
            }
        }
    }
}

/// Displacement field of a control grid, usable as a transform together with
/// an affine.
pub(crate) struct Ffd<'a> {
    pub grid: &'a ControlGrid,
    pub affine: &'a AffineTransform3D,
    pub d: &'a [[f64; 3]],
}

impl Transform for Ffd<'_> {
    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut w = Vec::with_capacity(8);
        self.grid.weights(p, &mut w);
        let mut y = self.affine.apply(p);
        for (k, wk) in w {
            for c in 0..3 {
                y[c] += wk * self.d[k][c];
            }
        }
        y
    }
}

/// Bending energy: squared second differences along each axis, with one
/// layer of zero displacement assumed outside the grid.
pub(crate) fn bending_energy(grid: &ControlGrid, d: &[[f64; 3]]) -> f64 {
    let mut e = 0.0;
    for_each_second_difference(grid, |terms| {
        for c in 0..3 {
            let s: f64 = terms.iter().map(|&(k, coef)| k.map_or(0.0, |k| coef * d[k][c])).sum();
            e += s * s;
        }
    });
    e
}

fn bending_gradient(grid: &ControlGrid, d: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut g = vec![[0.0; 3]; d.len()];
    for_each_second_difference(grid, |terms| {
        for c in 0..3 {
            let s: f64 = terms.iter().map(|&(k, coef)| k.map_or(0.0, |k| coef * d[k][c])).sum();
            for &(k, coef) in terms {
                if let Some(k) = k {
                    g[k][c] += 2.0 * s * coef;
                }
            }
        }
    });
    g
}

/// Calls `f` with the three (node, coefficient) terms `d[k-1] - 2 d[k] +
/// d[k+1]` centred on every node and axis; `None` is a padding node.
fn for_each_second_difference(grid: &ControlGrid, mut f: impl FnMut(&[(Option<usize>, f64); 3])) {
    let [nx, ny, nz] = grid.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = [i, j, k];
                for a in 0..3 {
                    let at = |off: isize| -> Option<usize> {
                        let mut q = c;
                        let v = c[a] as isize + off;
                        if v < 0 || v >= grid.dims[a] as isize {
                            return None;
                        }
                        q[a] = v as usize;
                        Some(grid.index(q[0], q[1], q[2]))
                    };
                    f(&[(at(-1), 1.0), (at(0), -2.0), (at(1), 1.0)]);
                }
            }
        }
    }
}

/// Per-level geometry shared by every evaluation.
struct LevelFfd<'a> {
    level: &'a Level,
    /// `A(x)` for every level voxel.
    base: Vec<[f64; 3]>,
    /// Control weights per level voxel.
    weights: Vec<Vec<(usize, f64)>>,
    /// Level voxels (with weights) influenced by each control node.
    support: Vec<Vec<(u32, f64)>>,
}

impl<'a> LevelFfd<'a> {
    fn new(level: &'a Level, grid: &ControlGrid, affine: &AffineTransform3D) -> Self {
        let base = level.points.iter().map(|&p| affine.apply(p)).collect();
        let mut buf = Vec::with_capacity(8);
        let weights: Vec<Vec<(usize, f64)>> = level
            .points
            .iter()
            .map(|&p| {
                grid.weights(p, &mut buf);
                buf.clone()
            })
            .collect();
        let mut support = vec![Vec::new(); grid.len()];
        for (v, ws) in weights.iter().enumerate() {
            for &(k, w) in ws {
                support[k].push((v as u32, w));
            }
        }
        LevelFfd {
            level,
            base,
            weights,
            support,
        }
    }

    fn mapped(&self, v: usize, d: &[[f64; 3]]) -> [f64; 3] {
        let mut y = self.base[v];
        for &(k, w) in &self.weights[v] {
            for c in 0..3 {
                y[c] += w * d[k][c];
            }
        }
        y
    }

    fn cost(&self, d: &[[f64; 3]]) -> f64 {
        self.level.cost_of(|v| self.mapped(v, d))
    }

    /// Central differences of the image cost with respect to every control
    /// displacement, each computed by replacing only the voxels in that
    /// node's support.
    fn cost_gradient(&self, d: &[[f64; 3]], delta: f64) -> Vec<[f64; 3]> {
        let n = self.level.points.len();
        let mapped: Vec<[f64; 3]> = (0..n).into_par_iter().map(|v| self.mapped(v, d)).collect();
        let values: Vec<f64> = mapped
            .par_iter()
            .map(|&y| self.level.moving.sample_trilinear(y))
            .collect();
        let lc = &self.level.cost;
        let total = self.level.accumulate(|v| values[v]);
        (0..self.support.len())
            .into_par_iter()
            .map(|k| {
                let mut g = [0.0; 3];
                if self.support[k].is_empty() {
                    return g;
                }
                for (c, gc) in g.iter_mut().enumerate() {
                    let mut side = [0.0; 2];
                    for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                        let mut acc = total.clone();
                        for &(v, w) in &self.support[k] {
                            let v = v as usize;
                            let mut y = mapped[v];
                            y[c] += sign * delta * w;
                            lc.sub(&mut acc, v, values[v]);
                            lc.add(&mut acc, v, self.level.moving.sample_trilinear(y));
                        }
                        side[s] = lc.value(&acc);
                    }
                    *gc = (side[0] - side[1]) / (2.0 * delta);
                }
                g
            })
            .collect()
    }
}

fn pack(d: &[[f64; 3]], unit: f64) -> Vec<f64> {
    d.iter().flat_map(|v| v.map(|x| x / unit)).collect()
}

fn unpack(p: &[f64], unit: f64) -> Vec<[f64; 3]> {
    p.chunks_exact(3).map(|c| [c[0] * unit, c[1] * unit, c[2] * unit]).collect()
}

/// Refines a successful affine registration with a free-form deformation.
/// The returned field is tabulated on the full-resolution fixed grid.
pub fn register_deformable(
    fixed: &Volume,
    moving: &Volume,
    cost: CostKind,
    opts: &RegistrationOptions,
    init: &RegistrationResult,
) -> Result<RegistrationResult> {
    opts.validate()?;
    if !opts.deformable.enabled {
        return Err(Error::Parameter("deformable refinement is disabled in the options".into()));
    }
    if init.failed {
        return Err(Error::InvalidInit(format!(
            "initial registration failed ({:?})",
            init.failure_reason
        )));
    }
    let dopts = &opts.deformable;
    let grid = ControlGrid::covering(fixed.geometry(), dopts.control_spacing_um);
    let pyramid = build_pyramid(fixed, moving, cost, opts)?;
    let mut d = vec![[0.0; 3]; grid.len()];
    let mut result = init.clone();
    result.cost = cost;
    result.options = opts.clone();
    let lambda = dopts.bending_weight;
    for (l, level) in pyramid.iter().enumerate() {
        let lf = LevelFfd::new(level, &grid, &init.affine);
        let unit = level.unit();
        let delta = opts.fd_step * unit;
        let cfg = DescentConfig {
            stage: Stage::Deformable,
            level: l,
            max_iters: dopts.max_iters_per_level,
            step_init: dopts.step_init,
            step_shrink: opts.step_shrink,
            step_grow: opts.step_grow,
            min_step: opts.min_step,
            converge_tol: opts.converge_tol,
            norm: Norm::Max,
        };
        let mut params = pack(&d, unit);
        let run = descend(
            &mut params,
            &cfg,
            |p| {
                let d = unpack(p, unit);
                lf.cost(&d) + lambda * bending_energy(&grid, &d)
            },
            |p| {
                let d = unpack(p, unit);
                let gc = lf.cost_gradient(&d, delta);
                let gb = bending_gradient(&grid, &d);
                gc.iter()
                    .zip(&gb)
                    .flat_map(|(a, b)| [0, 1, 2].map(|c| (a[c] + lambda * b[c]) * unit))
                    .collect()
            },
            &mut result.cost_trace,
        );
        d = unpack(&params, unit);
        result.final_cost = run.cost;
        log::debug!("deformable level {l}: objective {}", run.cost);
    }
    let zero = AffineTransform3D::new([[0.0; 3]; 3], [0.0; 3]);
    let displacement = Ffd {
        grid: &grid,
        affine: &zero,
        d: &d,
    };
    let field = rasterize_displacement(&displacement, fixed.geometry())?;
    result.field = Some(field);
    Ok(result)
}

/// Tabulates the pure displacement `u` at every voxel centre of `g`.
fn rasterize_displacement(u: &Ffd<'_>, g: &Geometry) -> Result<DeformationField> {
    let disp = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let [a, b, c] = g.coords(i);
            u.apply(g.voxel_center(a, b, c))
        })
        .collect();
    DeformationField::new(*g, disp)
}
