//! Similarity costs. All are oriented so that lower is better: SSD as is,
//! NCC and MI negated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    Ssd,
    #[serde(alias = "cc")]
    Ncc,
    Mi,
}

impl CostKind {
    pub fn name(self) -> &'static str {
        match self {
            CostKind::Ssd => "SSD",
            CostKind::Ncc => "CC",
            CostKind::Mi => "MI",
        }
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ssd" => Ok(CostKind::Ssd),
            "ncc" | "cc" => Ok(CostKind::Ncc),
            "mi" => Ok(CostKind::Mi),
            other => Err(Error::Parameter(format!("unknown cost {other:?}"))),
        }
    }
}

fn masked_pairs(fixed: &Volume, moving: &Volume, mask: Option<&Volume>) -> Result<Vec<(f64, f64)>> {
    if fixed.geometry() != moving.geometry() {
        return Err(Error::GridMismatch("fixed and moving differ in geometry".into()));
    }
    if let Some(m) = mask {
        if m.geometry() != fixed.geometry() {
            return Err(Error::GridMismatch("mask differs in geometry".into()));
        }
    }
    let pairs: Vec<(f64, f64)> = fixed
        .data()
        .iter()
        .zip(moving.data())
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m.data()[*i] > 0.5))
        .map(|(_, (&f, &m))| (f, m))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(pairs)
}

/// Mean squared difference over the mask.
pub fn cost_ssd(fixed: &Volume, moving: &Volume, mask: Option<&Volume>) -> Result<f64> {
    let pairs = masked_pairs(fixed, moving, mask)?;
    let s: f64 = pairs.iter().map(|(f, m)| (f - m) * (f - m)).sum();
    Ok(s / pairs.len() as f64)
}

/// Negated Pearson correlation over the mask.
pub fn cost_ncc(fixed: &Volume, moving: &Volume, mask: Option<&Volume>) -> Result<f64> {
    let pairs = masked_pairs(fixed, moving, mask)?;
    let n = pairs.len() as f64;
    let mf = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mm = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sff, mut smm, mut sfm) = (0.0, 0.0, 0.0);
    for (f, m) in &pairs {
        let (a, b) = (f - mf, m - mm);
        sff += a * a;
        smm += b * b;
        sfm += a * b;
    }
    if sff == 0.0 || smm == 0.0 {
        return Err(Error::DegenerateStatistics(
            "constant intensities under the mask".into(),
        ));
    }
    Ok(-(sfm / (sff * smm).sqrt()).clamp(-1.0, 1.0))
}

/// Square joint histogram, rows indexed by the first volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointHistogram {
    pub bins: usize,
    pub counts: Vec<u64>,
}

impl JointHistogram {
    pub fn zeros(bins: usize) -> Self {
        JointHistogram {
            bins,
            counts: vec![0; bins * bins],
        }
    }

    pub fn get(&self, a: usize, b: usize) -> u64 {
        self.counts[a * self.bins + b]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mutual information in bits, `Σ p log2(p / (p_a p_b))` with empty cells
    /// contributing nothing.
    pub fn mutual_information(&self) -> f64 {
        let k = self.bins;
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        let mut rows = vec![0u64; k];
        let mut cols = vec![0u64; k];
        for a in 0..k {
            for b in 0..k {
                let c = self.get(a, b);
                rows[a] += c;
                cols[b] += c;
            }
        }
        let nf = n as f64;
        let mut mi = 0.0;
        for a in 0..k {
            for b in 0..k {
                let c = self.get(a, b);
                if c > 0 {
                    let ratio = (c as f64 * nf) / (rows[a] as f64 * cols[b] as f64);
                    mi += (c as f64 / nf) * ratio.log2();
                }
            }
        }
        mi.max(0.0)
    }
}

/// Equal-width bin of `v` on `[lo, hi]`; `hi` lands in the last bin and a
/// degenerate range puts everything in bin 0.
#[inline]
pub(crate) fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if !(hi > lo) {
        return 0;
    }
    let t = ((v - lo) * bins as f64 / (hi - lo)).floor();
    if t <= 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub fn joint_histogram(a: &Volume, b: &Volume, bins: usize, mask: Option<&Volume>) -> Result<JointHistogram> {
    if bins < 2 {
        return Err(Error::Parameter(format!("need at least 2 bins, got {bins}")));
    }
    let pairs = masked_pairs(a, b, mask)?;
    let (alo, ahi) = range(pairs.iter().map(|p| p.0));
    let (blo, bhi) = range(pairs.iter().map(|p| p.1));
    let mut h = JointHistogram::zeros(bins);
    for (x, y) in pairs {
        h.counts[bin_index(x, alo, ahi, bins) * bins + bin_index(y, blo, bhi, bins)] += 1;
    }
    Ok(h)
}

/// Negated mutual information in bits.
pub fn cost_mi(fixed: &Volume, moving: &Volume, mask: Option<&Volume>, bins: usize) -> Result<f64> {
    Ok(-joint_histogram(fixed, moving, bins, mask)?.mutual_information())
}

pub fn evaluate_cost(kind: CostKind, fixed: &Volume, moving: &Volume, mask: Option<&Volume>, mi_bins: usize) -> Result<f64> {
    match kind {
        CostKind::Ssd => cost_ssd(fixed, moving, mask),
        CostKind::Ncc => cost_ncc(fixed, moving, mask),
        CostKind::Mi => cost_mi(fixed, moving, mask, mi_bins),
    }
}

/// Running sufficient statistics of a cost, supporting removal so a local
/// change only touches the affected voxels.
#[derive(Clone, Debug)]
pub(crate) enum Acc {
    Ssd { n: f64, s: f64 },
    Ncc { n: f64, sf: f64, sm: f64, sff: f64, smm: f64, sfm: f64 },
    Mi { hist: JointHistogram },
}

impl Acc {
    pub fn merge(&mut self, other: &Acc) {
        match (self, other) {
            (Acc::Ssd { n, s }, Acc::Ssd { n: n2, s: s2 }) => {
                *n += n2;
                *s += s2;
            }
            (
                Acc::Ncc { n, sf, sm, sff, smm, sfm },
                Acc::Ncc { n: n2, sf: sf2, sm: sm2, sff: sff2, smm: smm2, sfm: sfm2 },
            ) => {
                *n += n2;
                *sf += sf2;
                *sm += sm2;
                *sff += sff2;
                *smm += smm2;
                *sfm += sfm2;
            }
            (Acc::Mi { hist }, Acc::Mi { hist: h2 }) => {
                for (a, b) in hist.counts.iter_mut().zip(&h2.counts) {
                    *a += b;
                }
            }
            _ => unreachable!("accumulators of different kinds"),
        }
    }
}

/// Cost of one pyramid level against a fixed reference. MI uses bin ranges
/// frozen for the whole level (fixed: its range, moving: its range widened
/// to include the 0 used outside the volume), so the histogram of a voxel
/// only changes when its moving intensity does.
pub(crate) struct LevelCost {
    kind: CostKind,
    fixed: Vec<f64>,
    fixed_bin: Vec<u16>,
    bins: usize,
    m_lo: f64,
    m_hi: f64,
    m_offset: f64,
}

impl LevelCost {
    pub fn new(kind: CostKind, fixed: &Volume, moving: &Volume, mi_bins: usize) -> Self {
        let n = fixed.len() as f64;
        let (f_lo, f_hi) = fixed.min_max();
        let (m_lo, m_hi) = moving.min_max();
        let (m_lo, m_hi) = (m_lo.min(0.0), m_hi.max(0.0));
        let (values, m_offset) = match kind {
            CostKind::Ncc => {
                // centring keeps the one-pass sums well conditioned
                let mean = fixed.data().iter().sum::<f64>() / n;
                let m_mean = moving.data().iter().sum::<f64>() / moving.len() as f64;
                (fixed.data().iter().map(|v| v - mean).collect(), m_mean)
            }
            _ => (fixed.data().to_vec(), 0.0),
        };
        let fixed_bin = match kind {
            CostKind::Mi => fixed
                .data()
                .iter()
                .map(|&v| bin_index(v, f_lo, f_hi, mi_bins) as u16)
                .collect(),
            _ => Vec::new(),
        };
        LevelCost {
            kind,
            fixed: values,
            fixed_bin,
            bins: mi_bins,
            m_lo,
            m_hi,
            m_offset,
        }
    }

    pub fn empty(&self) -> Acc {
        match self.kind {
            CostKind::Ssd => Acc::Ssd { n: 0.0, s: 0.0 },
            CostKind::Ncc => Acc::Ncc {
                n: 0.0,
                sf: 0.0,
                sm: 0.0,
                sff: 0.0,
                smm: 0.0,
                sfm: 0.0,
            },
            CostKind::Mi => Acc::Mi {
                hist: JointHistogram::zeros(self.bins),
            },
        }
    }

    #[inline]
    pub fn add(&self, acc: &mut Acc, idx: usize, m: f64) {
        self.update(acc, idx, m, 1.0);
    }

    #[inline]
    pub fn sub(&self, acc: &mut Acc, idx: usize, m: f64) {
        self.update(acc, idx, m, -1.0);
    }

    #[inline]
    fn update(&self, acc: &mut Acc, idx: usize, m: f64, sign: f64) {
        let f = self.fixed[idx];
        match acc {
            Acc::Ssd { n, s } => {
                *n += sign;
                *s += sign * (f - m) * (f - m);
            }
            Acc::Ncc { n, sf, sm, sff, smm, sfm } => {
                let m = m - self.m_offset;
                *n += sign;
                *sf += sign * f;
                *sm += sign * m;
                *sff += sign * f * f;
                *smm += sign * m * m;
                *sfm += sign * f * m;
            }
            Acc::Mi { hist } => {
                let b = bin_index(m, self.m_lo, self.m_hi, self.bins);
                let cell = &mut hist.counts[self.fixed_bin[idx] as usize * self.bins + b];
                if sign > 0.0 {
                    *cell += 1;
                } else {
                    *cell -= 1;
                }
            }
        }
    }

    /// Cost value; NCC with a constant side counts as uncorrelated.
    pub fn value(&self, acc: &Acc) -> f64 {
        match acc {
            Acc::Ssd { n, s } => {
                if *n > 0.0 {
                    s / n
                } else {
                    0.0
                }
            }
            Acc::Ncc { n, sf, sm, sff, smm, sfm } => {
                if *n < 1.0 {
                    return 0.0;
                }
                let vf = sff - sf * sf / n;
                let vm = smm - sm * sm / n;
                let cov = sfm - sf * sm / n;
                if !(vf > 0.0 && vm > 0.0) {
                    return 0.0;
                }
                -(cov / (vf * vm).sqrt()).clamp(-1.0, 1.0)
            }
            Acc::Mi { hist } => -hist.mutual_information(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn vol(data: Vec<f64>) -> Volume {
        let n = data.len();
        Volume::from_geometry(Geometry::new([n, 1, 1], [1.0; 3], [0.0; 3]).unwrap(), data).unwrap()
    }

    #[test]
    fn ssd_hand_value() {
        assert_eq!(cost_ssd(&vol(vec![0.0, 0.0]), &vol(vec![3.0, 4.0]), None).unwrap(), 12.5);
        let mask = vol(vec![1.0, 0.0, 0.0]);
        assert_eq!(
            cost_ssd(&vol(vec![1.0, 2.0, 3.0]), &vol(vec![1.0, 7.0, 9.0]), Some(&mask)).unwrap(),
            0.0
        );
        assert!(matches!(
            cost_ssd(&vol(vec![1.0]), &vol(vec![1.0]), Some(&vol(vec![0.0]))),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn ncc_basics() {
        let f = vol(vec![1.0, 5.0, 2.0, 8.0]);
        assert_eq!(cost_ncc(&f, &f, None).unwrap(), -1.0);
        let g = f.map(|v| 3.0 * v + 7.0);
        assert!((cost_ncc(&f, &g, None).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            cost_ncc(&f, &vol(vec![2.0; 4]), None),
            Err(Error::DegenerateStatistics(_))
        ));
    }

    #[test]
    fn mi_constructed() {
        let mut h = JointHistogram::zeros(2);
        h.counts = vec![1, 0, 0, 1];
        assert_eq!(h.mutual_information(), 1.0);
        let mut h = JointHistogram::zeros(4);
        let a = [1u64, 2, 3, 4];
        let b = [2u64, 2, 1, 5];
        for i in 0..4 {
            for j in 0..4 {
                h.counts[i * 4 + j] = a[i] * b[j];
            }
        }
        assert!(h.mutual_information().abs() < 1e-12);
    }

    #[test]
    fn ramp_histogram_is_diagonal() {
        let r = vol((0..32).map(f64::from).collect());
        let h = joint_histogram(&r, &r, 32, None).unwrap();
        for a in 0..32 {
            for b in 0..32 {
                assert_eq!(h.get(a, b), u64::from(a == b));
            }
        }
        let c = joint_histogram(&vol(vec![4.0; 32]), &r, 32, None).unwrap();
        assert_eq!((0..32).map(|b| c.get(0, b)).sum::<u64>(), 32);
    }

    #[test]
    fn accumulator_matches_direct_costs() {
        let f = vol((0..50).map(|i| ((i * 7) % 13) as f64).collect());
        let m = vol((0..50).map(|i| ((i * 5) % 11) as f64 + 0.5).collect());
        for kind in [CostKind::Ssd, CostKind::Ncc] {
            let lc = LevelCost::new(kind, &f, &m, 8);
            let mut acc = lc.empty();
            for (i, &v) in m.data().iter().enumerate() {
                lc.add(&mut acc, i, v);
            }
            let direct = evaluate_cost(kind, &f, &m, None, 8).unwrap();
            assert!((lc.value(&acc) - direct).abs() < 1e-12, "{kind}");
            lc.sub(&mut acc, 3, m.data()[3]);
            lc.add(&mut acc, 3, m.data()[3]);
            assert!((lc.value(&acc) - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn cost_names_parse() {
        assert_eq!("cc".parse::<CostKind>().unwrap(), CostKind::Ncc);
        assert_eq!("SSD".parse::<CostKind>().unwrap(), CostKind::Ssd);
        assert!("l1".parse::<CostKind>().is_err());
    }
}
