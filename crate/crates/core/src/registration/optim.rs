//! Pyramid construction and the shared normalised-gradient descent loop.

use rayon::prelude::*;

use super::cost::{Acc, LevelCost};
use super::{CostKind, RegistrationOptions, Stage, TraceEntry};
use crate::error::Result;
use crate::volume::{gaussian_smooth, subsample, Volume};

/// One resolution level: the fixed image smoothed and subsampled, the moving
/// image smoothed at the same physical scale but kept at full resolution.
pub(crate) struct Level {
    pub factor: usize,
    pub fixed: Volume,
    pub moving: Volume,
    pub cost: LevelCost,
    /// Voxel centres of `fixed`.
    pub points: Vec<[f64; 3]>,
}

impl Level {
    /// Mean voxel size of the level grid in µm; parameter steps are measured
    /// in these units.
    pub fn unit(&self) -> f64 {
        let s = self.fixed.spacing();
        (s[0] + s[1] + s[2]) / 3.0
    }

    /// Cost of the moving image sampled at `mapped[i]` for every level voxel.
    /// Chunks are reduced in index order so the result does not depend on
    /// thread scheduling.
    pub fn cost_of(&self, mapped: impl Fn(usize) -> [f64; 3] + Sync) -> f64 {
        self.cost.value(&self.accumulate(|i| self.moving.sample_trilinear(mapped(i))))
    }

    pub fn accumulate(&self, moving_at: impl Fn(usize) -> f64 + Sync) -> Acc {
        const CHUNK: usize = 4096;
        let n = self.points.len();
        let parts: Vec<Acc> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = self.cost.empty();
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    self.cost.add(&mut acc, i, moving_at(i));
                }
                acc
            })
            .collect();
        let mut total = self.cost.empty();
        for p in &parts {
            total.merge(p);
        }
        total
    }
}

pub(crate) fn build_pyramid(
    fixed: &Volume,
    moving: &Volume,
    kind: CostKind,
    opts: &RegistrationOptions,
) -> Result<Vec<Level>> {
    let mut levels = Vec::with_capacity(opts.levels);
    for l in 0..opts.levels {
        let factor = 1usize << (opts.levels - 1 - l);
        let (f, m) = if factor == 1 {
            (fixed.clone(), moving.clone())
        } else {
            let s = fixed.spacing();
            let sigma = [
                0.5 * factor as f64 * s[0],
                0.5 * factor as f64 * s[1],
                0.5 * factor as f64 * s[2],
            ];
            (
                subsample(&gaussian_smooth(fixed, sigma)?, [factor; 3]),
                gaussian_smooth(moving, sigma)?,
            )
        };
        let g = *f.geometry();
        let points = (0..g.len())
            .map(|i| {
                let [a, b, c] = g.coords(i);
                g.voxel_center(a, b, c)
            })
            .collect();
        let cost = LevelCost::new(kind, &f, &m, opts.mi_bins);
        levels.push(Level {
            factor,
            fixed: f,
            moving: m,
            cost,
            points,
        });
    }
    Ok(levels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Norm {
    L2,
    Max,
}

pub(crate) struct LevelRun {
    pub cost: f64,
    /// Whether the level stopped on the tolerance or step floor rather than
    /// the iteration cap.
    pub converged: bool,
    pub last_rel_change: f64,
}

pub(crate) struct DescentConfig {
    pub stage: Stage,
    pub level: usize,
    pub max_iters: usize,
    pub step_init: f64,
    pub step_shrink: f64,
    pub step_grow: f64,
    pub min_step: f64,
    pub converge_tol: f64,
    pub norm: Norm,
}

/// Normalised-gradient descent. A trial move that does not lower the
/// objective is rejected and the step shrinks; accepted moves are appended to
/// `trace`, so the recorded objective never increases within a level.
pub(crate) fn descend(
    params: &mut [f64],
    cfg: &DescentConfig,
    objective: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64]) -> Vec<f64>,
    trace: &mut Vec<TraceEntry>,
) -> LevelRun {
    let mut cost = objective(params);
    let mut step = cfg.step_init;
    trace.push(TraceEntry {
        stage: cfg.stage,
        level: cfg.level,
        iter: 0,
        cost,
        step,
    });
    let mut last_rel = f64::INFINITY;
    let mut trial = params.to_vec();
    for iter in 1..=cfg.max_iters {
        let g = gradient(params);
        let norm = match cfg.norm {
            Norm::L2 => g.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Norm::Max => g.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        };
        if !(norm > 0.0) || !norm.is_finite() {
            return LevelRun {
                cost,
                converged: true,
                last_rel_change: 0.0,
            };
        }
        loop {
            for ((t, p), gi) in trial.iter_mut().zip(params.iter()).zip(&g) {
                *t = p - step * gi / norm;
            }
            let c = objective(&trial);
            if c < cost {
                last_rel = (cost - c) / cost.abs().max(1e-300);
                cost = c;
                params.copy_from_slice(&trial);
                trace.push(TraceEntry {
                    stage: cfg.stage,
                    level: cfg.level,
                    iter,
                    cost,
                    step,
                });
                step = (step * cfg.step_grow).min(cfg.step_init);
                break;
            }
            step *= cfg.step_shrink;
            if step < cfg.min_step {
                return LevelRun {
                    cost,
                    converged: true,
                    last_rel_change: 0.0,
                };
            }
        }
        if last_rel < cfg.converge_tol {
            return LevelRun {
                cost,
                converged: true,
                last_rel_change: last_rel,
            };
        }
    }
    LevelRun {
        cost,
        converged: false,
        last_rel_change: last_rel,
    }
}
