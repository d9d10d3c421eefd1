//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the library's numerical code; each oracle is a
//! direct, unoptimised transcription of the defining formula.

#![allow(dead_code)]

use modsynth::{Geometry, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_volume(r: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3]) -> Volume {
    let geom = Geometry::new(dims, spacing, [0.0; 3]).unwrap();
    let data = (0..geom.len()).map(|_| r.random_range(0.0..255.0)).collect();
    Volume::from_geometry(geom, data).unwrap()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            for k in 0..b[row].len() {
                b[row][k] -= f * b[col][k];
            }
        }
    }
    let m = b[0].len();
    let mut x = vec![vec![0.0; m]; n];
    for row in (0..n).rev() {
        for k in 0..m {
            let mut s = b[row][k];
            for j in row + 1..n {
                s -= a[row][j] * x[j][k];
            }
            x[row][k] = s / a[row][row];
        }
    }
    x
}

fn norm(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Thin-plate spline with kernel `U(r) = r`, as a closure.
pub fn tps_oracle(src: &[[f64; 3]], dst: &[[f64; 3]]) -> impl Fn([f64; 3]) -> [f64; 3] {
    let n = src.len();
    let m = n + 4;
    let mut a = vec![vec![0.0; m]; m];
    let mut b = vec![vec![0.0; 3]; m];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = norm(src[i], src[j]);
        }
        let p = [1.0, src[i][0], src[i][1], src[i][2]];
        for k in 0..4 {
            a[i][n + k] = p[k];
            a[n + k][i] = p[k];
        }
        b[i] = dst[i].to_vec();
    }
    let x = gauss_solve(a, b);
    let src = src.to_vec();
    move |p| {
        let mut out = [0.0; 3];
        for d in 0..3 {
            let mut v = x[n][d] + x[n + 1][d] * p[0] + x[n + 2][d] * p[1] + x[n + 3][d] * p[2];
            for i in 0..n {
                v += x[i][d] * norm(p, src[i]);
            }
            out[d] = v;
        }
        out
    }
}

/// Trilinear interpolation written out over the eight corners, 0 outside
/// the voxel-centre hull.
pub fn trilinear_oracle(v: &Volume, p: [f64; 3]) -> f64 {
    let g = v.geometry();
    let mut c = [0.0; 3];
    for a in 0..3 {
        c[a] = (p[a] - g.origin[a]) / g.spacing[a];
        let hi = (g.dims[a] - 1) as f64;
        if c[a] < -1e-9 || c[a] > hi + 1e-9 {
            return 0.0;
        }
        c[a] = c[a].clamp(0.0, hi);
    }
    let mut total = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let lo = c[a].floor();
            let f = c[a] - lo;
            let up = (corner >> a) & 1 == 1;
            let i = if up { lo as usize + 1 } else { lo as usize };
            if i >= g.dims[a] {
                // Weight of an out-of-range corner is zero at the upper face.
                w = 0.0;
                idx[a] = g.dims[a] - 1;
            } else {
                idx[a] = i;
            }
            w *= if up { f } else { 1.0 - f };
        }
        if w != 0.0 {
            total += w * v.get(idx[0], idx[1], idx[2]);
        }
    }
    total
}

fn equal_width_bin(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let t = ((v - lo) / (hi - lo) * bins as f64).floor();
    (t.max(0.0) as usize).min(bins - 1)
}

fn entropy_bits(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.ln() / std::f64::consts::LN_2
        })
        .sum()
}

/// `H(A) + H(B) − H(A, B)` in bits over equal-width bins spanning each
/// volume's own range.
pub fn mi_oracle(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let (alo, ahi) = a.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let (blo, bhi) = b.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let mut joint = vec![0.0; bins * bins];
    let mut ma = vec![0.0; bins];
    let mut mb = vec![0.0; bins];
    for (&x, &y) in a.iter().zip(b) {
        let i = equal_width_bin(x, alo, ahi, bins);
        let j = equal_width_bin(y, blo, bhi, bins);
        joint[i * bins + j] += 1.0;
        ma[i] += 1.0;
        mb[j] += 1.0;
    }
    let n = a.len() as f64;
    entropy_bits(&ma, n) + entropy_bits(&mb, n) - entropy_bits(&joint, n)
}

/// Pearson correlation by the textbook covariance formula.
pub fn ncc_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Sum of Gaussian blobs on an isotropic grid; smooth and noiseless.
pub fn smooth_blobs(dims: [usize; 3]) -> Volume {
    let geom = Geometry::new(dims, [1.0; 3], [0.0; 3]).unwrap();
    let centres = [
        ([0.35, 0.40, 0.45], 4.0, 1.0),
        ([0.65, 0.55, 0.50], 5.0, 0.7),
        ([0.50, 0.30, 0.60], 3.0, 0.9),
        ([0.40, 0.70, 0.40], 4.5, 0.6),
    ];
    Volume::from_fn(geom, |i, j, k| {
        let x = [i as f64, j as f64, k as f64];
        centres
            .iter()
            .map(|(c, s, amp)| {
                let q: f64 = (0..3)
                    .map(|a| (x[a] - c[a] * (dims[a] - 1) as f64).powi(2))
                    .sum();
                255.0 * amp * (-0.5 * q / (s * s)).exp()
            })
            .sum()
    })
}
