//! Landmark transfer errors, summary statistics and report files.
//!
//! Errors are Euclidean distances in micrometres between annotated landmark
//! positions and positions predicted by a transform. Summaries carry the
//! median, mean and population standard deviation of one subject/method
//! group, and [`emit_report`] writes both the per-landmark records and the
//! summaries as CSV with a stable row order.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::xform::{LandmarkSet, Transform};

/// File name of the per-landmark error table inside a report directory.
pub const LANDMARK_ERRORS_FILE: &str = "landmark_errors.csv";
/// File name of the summary table inside a report directory.
pub const SUMMARY_FILE: &str = "summary.csv";

/// One landmark's transfer error for one subject and method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkErrorRecord {
    pub subject: String,
    pub method: String,
    pub landmark: String,
    pub error_um: f64,
}

/// Summary statistics of a group of landmark errors.
///
/// A failed registration still gets a row; its statistics are computed from
/// whatever records exist, or left at zero with `n == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub n: usize,
    pub median_um: f64,
    pub mean_um: f64,
    pub std_um: f64,
    pub failed: bool,
}

impl ErrorSummary {
    /// Summary row for a run that produced no usable transform.
    pub fn failed() -> Self {
        ErrorSummary {
            n: 0,
            median_um: 0.0,
            mean_um: 0.0,
            std_um: 0.0,
            failed: true,
        }
    }
}

/// A summary tagged with the subject and method it describes.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub subject: String,
    pub method: String,
    pub summary: ErrorSummary,
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Computes `‖t(moving_pt) − fixed_pt‖` for every active landmark.
///
/// `t` must map moving space into fixed space. A registration result maps
/// template points to subject points, so callers evaluating one pass the
/// [`swapped`](LandmarkSet::swapped) landmark set.
pub fn landmark_error(
    t: &dyn Transform,
    lms: &LandmarkSet,
    subject: &str,
    method: &str,
) -> Vec<LandmarkErrorRecord> {
    lms.active()
        .map(|l| LandmarkErrorRecord {
            subject: subject.to_string(),
            method: method.to_string(),
            landmark: l.name.clone(),
            error_um: distance(t.apply(l.moving_pt), l.fixed_pt),
        })
        .collect()
}

/// Median, mean and population standard deviation of the record errors.
///
/// For an even count the median is the lower of the two middle values.
pub fn summarize(records: &[LandmarkErrorRecord]) -> Result<ErrorSummary> {
    if records.is_empty() {
        return Err(Error::Empty("no landmark error records to summarize".into()));
    }
    let mut e: Vec<f64> = records.iter().map(|r| r.error_um).collect();
    e.sort_by(f64::total_cmp);
    let n = e.len();
    let median = e[(n - 1) / 2];
    // Sum in sorted order so the result does not depend on input order.
    let mean = e.iter().sum::<f64>() / n as f64;
    let var = e.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    Ok(ErrorSummary {
        n,
        median_um: median,
        mean_um: mean,
        std_um: var.sqrt(),
        failed: false,
    })
}

/// Distances between two annotators' moving points, matched by name.
///
/// Both sets must contain exactly the same landmark names.
pub fn inter_annotator_error(a: &LandmarkSet, b: &LandmarkSet) -> Result<Vec<LandmarkErrorRecord>> {
    let mut missing: Vec<String> = a
        .landmarks
        .iter()
        .filter(|l| b.get(&l.name).is_none())
        .chain(b.landmarks.iter().filter(|l| a.get(&l.name).is_none()))
        .map(|l| l.name.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::NameMismatch(missing));
    }
    Ok(a.landmarks
        .iter()
        .map(|la| {
            let lb = b.get(&la.name).expect("names checked above");
            LandmarkErrorRecord {
                subject: String::new(),
                method: "inter-annotator".into(),
                landmark: la.name.clone(),
                error_um: distance(la.moving_pt, lb.moving_pt),
            }
        })
        .collect())
}

/// Counts runs that did not fail and whose mean error is below `threshold_um`.
///
/// Returns `(n_success, n_total)`.
pub fn tally_success<S: AsRef<str>>(summaries: &[(S, ErrorSummary)], threshold_um: f64) -> (usize, usize) {
    let ok = summaries
        .iter()
        .filter(|(_, s)| !s.failed && s.mean_um < threshold_um)
        .count();
    (ok, summaries.len())
}

fn record_order(a: &LandmarkErrorRecord, b: &LandmarkErrorRecord) -> Ordering {
    (&a.subject, &a.method, &a.landmark).cmp(&(&b.subject, &b.method, &b.landmark))
}

/// Writes `landmark_errors.csv` and `summary.csv` into `dir`.
///
/// Rows are sorted by subject, method and landmark name with a stable sort,
/// and floats use the shortest representation that parses back exactly.
pub fn emit_report(records: &[LandmarkErrorRecord], summaries: &[SummaryRow], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut recs: Vec<&LandmarkErrorRecord> = records.iter().collect();
    recs.sort_by(|a, b| record_order(a, b));
    let path = dir.join(LANDMARK_ERRORS_FILE);
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::format(&path, e.to_string());
    w.write_record(["subject", "method", "landmark", "error_um"]).map_err(csv_err)?;
    for r in recs {
        w.write_record([&r.subject, &r.method, &r.landmark, &r.error_um.to_string()])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(&path, e.to_string()))?;
    crate::io::write_atomic(&path, &bytes)?;

    let mut rows: Vec<&SummaryRow> = summaries.iter().collect();
    rows.sort_by(|a, b| (&a.subject, &a.method).cmp(&(&b.subject, &b.method)));
    let path = dir.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::format(&path, e.to_string());
    w.write_record(["subject", "method", "n", "median", "mean", "std", "failed"])
        .map_err(csv_err)?;
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.subject.clone(),
            r.method.clone(),
            s.n.to_string(),
            s.median_um.to_string(),
            s.mean_um.to_string(),
            s.std_um.to_string(),
            s.failed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(&path, e.to_string()))?;
    crate::io::write_atomic(&path, &bytes)
}

/// Reads a per-landmark error table written by [`emit_report`].
pub fn read_landmark_errors(path: impl AsRef<Path>) -> Result<Vec<LandmarkErrorRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Reads a summary table written by [`emit_report`].
pub fn read_summaries(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    #[derive(Deserialize)]
    struct Row {
        subject: String,
        method: String,
        n: usize,
        median: f64,
        mean: f64,
        std: f64,
        failed: bool,
    }
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize::<Row>()
        .map(|row| {
            let row = row.map_err(|e| Error::format(path, e.to_string()))?;
            Ok(SummaryRow {
                subject: row.subject,
                method: row.method,
                summary: ErrorSummary {
                    n: row.n,
                    median_um: row.median,
                    mean_um: row.mean,
                    std_um: row.std,
                    failed: row.failed,
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xform::{Identity, Landmark};

    fn rec(e: f64) -> LandmarkErrorRecord {
        LandmarkErrorRecord {
            subject: "s".into(),
            method: "m".into(),
            landmark: "l".into(),
            error_um: e,
        }
    }

    #[test]
    fn summary_of_one_two_three() {
        let s = summarize(&[rec(3.0), rec(1.0), rec(2.0)]).unwrap();
        assert_eq!(s.median_um, 2.0);
        assert_eq!(s.mean_um, 2.0);
        assert!((s.std_um - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn even_median_is_lower_middle() {
        let s = summarize(&[rec(4.0), rec(1.0), rec(3.0), rec(2.0)]).unwrap();
        assert_eq!(s.median_um, 2.0);
    }

    #[test]
    fn empty_summary_is_error() {
        assert!(matches!(summarize(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn identity_error_is_point_distance() {
        let lms = LandmarkSet::new(vec![
            Landmark::new("a", [0.0, 0.0, 0.0], [3.0, 4.0, 0.0]),
            Landmark::new("b", [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]),
        ])
        .unwrap();
        let r = landmark_error(&Identity, &lms, "s", "m");
        assert_eq!(r[0].error_um, 5.0);
        assert_eq!(r[1].error_um, 0.0);
    }

    #[test]
    fn annotator_name_mismatch() {
        let a = LandmarkSet::new(vec![Landmark::new("a", [0.0; 3], [0.0; 3])]).unwrap();
        let b = LandmarkSet::new(vec![Landmark::new("b", [0.0; 3], [0.0; 3])]).unwrap();
        match inter_annotator_error(&a, &b) {
            Err(Error::NameMismatch(names)) => assert_eq!(names, vec!["a".to_string(), "b".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tally_extremes() {
        let s = summarize(&[rec(2.0)]).unwrap();
        let list = vec![("a", s), ("b", s), ("c", ErrorSummary::failed())];
        assert_eq!(tally_success(&list, 1.0), (0, 3));
        assert_eq!(tally_success(&list, 10.0), (2, 3));
    }
}
