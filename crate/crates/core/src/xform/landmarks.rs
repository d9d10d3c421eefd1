//! Paired landmarks and the BigWarp-compatible CSV format.
//!
//! One row per landmark, no header:
//!
//! ```text
//! "Pt-0","true",mvg_x,mvg_y,mvg_z,fix_x,fix_y,fix_z
//! ```
//!
//! Coordinates are in µm. Quoted and unquoted fields are both accepted on read.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub name: String,
    pub active: bool,
    pub moving_pt: [f64; 3],
    pub fixed_pt: [f64; 3],
}

impl Landmark {
    pub fn new(name: impl Into<String>, moving_pt: [f64; 3], fixed_pt: [f64; 3]) -> Self {
        Landmark {
            name: name.into(),
            active: true,
            moving_pt,
            fixed_pt,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LandmarkSet {
    pub landmarks: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(landmarks: Vec<Landmark>) -> Result<Self> {
        let set = LandmarkSet { landmarks };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for l in &self.landmarks {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Parameter(format!("duplicate landmark name {:?}", l.name)));
            }
            if l.moving_pt.iter().chain(&l.fixed_pt).any(|v| !v.is_finite()) {
                return Err(Error::Parameter(format!(
                    "landmark {:?} has non-finite coordinates",
                    l.name
                )));
            }
        }
        Ok(())
    }

    pub fn active(&self) -> impl Iterator<Item = &Landmark> {
        self.landmarks.iter().filter(|l| l.active)
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    /// Moving and fixed roles exchanged.
    pub fn swapped(&self) -> Self {
        LandmarkSet {
            landmarks: self
                .landmarks
                .iter()
                .map(|l| Landmark {
                    name: l.name.clone(),
                    active: l.active,
                    moving_pt: l.fixed_pt,
                    fixed_pt: l.moving_pt,
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Landmark> {
        self.landmarks.iter().find(|l| l.name == name)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        for l in &self.landmarks {
            let _ = write!(
                s,
                "\"{}\",\"{}\"",
                l.name.replace('"', "\"\""),
                if l.active { "true" } else { "false" }
            );
            for v in l.moving_pt.iter().chain(&l.fixed_pt) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv_string().as_bytes())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text).map_err(|e| match e {
            Error::Parameter(reason) => Error::corrupt(path, reason),
            other => other,
        })
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut landmarks = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parameter(format!("row {row}: {e}")))?;
            if rec.len() == 1 && rec[0].is_empty() {
                continue;
            }
            if rec.len() != 8 {
                return Err(Error::Parameter(format!(
                    "row {row}: expected 8 fields, got {}",
                    rec.len()
                )));
            }
            let coords: std::result::Result<Vec<f64>, _> =
                (2..8).map(|i| rec[i].parse::<f64>()).collect();
            let coords = match coords {
                Ok(c) => c,
                // tolerate a leading header row
                Err(_) if row == 0 => continue,
                Err(e) => return Err(Error::Parameter(format!("row {row}: {e}"))),
            };
            let active = match rec[1].to_ascii_lowercase().as_str() {
                "true" | "1" => true,
                "false" | "0" => false,
                other => {
                    return Err(Error::Parameter(format!(
                        "row {row}: bad active flag {other:?}"
                    )))
                }
            };
            landmarks.push(Landmark {
                name: rec[0].to_string(),
                active,
                moving_pt: [coords[0], coords[1], coords[2]],
                fixed_pt: [coords[3], coords[4], coords[5]],
            });
        }
        LandmarkSet::new(landmarks)
    }
}
