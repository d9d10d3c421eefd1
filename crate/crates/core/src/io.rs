//! Volume file I/O.
//!
//! Supported inputs:
//!
//! * NRRD (`.nrrd`) with an attached header, `dimension: 3`, raw or gzip
//!   encoding, little-endian, axis-aligned `space directions` (or `spacings`).
//!   Sample types `float`, `double` and the common integer types are widened
//!   to `f64` on load.
//! * A raw fallback: `<name>.raw` plus a `<name>.meta` sidecar of
//!   `key = value` lines (`dims`, `spacing`, `origin`, `dtype`).
//!
//! [`save_volume`] always writes NRRD with `type: double` so that a save/load
//! roundtrip is exact.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Geometry, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Encoding {
    #[default]
    Raw,
    Gzip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SampleType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl SampleType {
    fn from_nrrd(s: &str) -> Option<Self> {
        Some(match s {
            "signed char" | "int8" | "int8_t" => SampleType::I8,
            "uchar" | "unsigned char" | "uint8" | "uint8_t" => SampleType::U8,
            "short" | "short int" | "signed short" | "signed short int" | "int16" | "int16_t" => {
                SampleType::I16
            }
            "ushort" | "unsigned short" | "unsigned short int" | "uint16" | "uint16_t" => {
                SampleType::U16
            }
            "int" | "signed int" | "int32" | "int32_t" => SampleType::I32,
            "uint" | "unsigned int" | "uint32" | "uint32_t" => SampleType::U32,
            "float" | "float32" => SampleType::F32,
            "double" | "float64" => SampleType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            SampleType::I8 | SampleType::U8 => 1,
            SampleType::I16 | SampleType::U16 => 2,
            SampleType::I32 | SampleType::U32 | SampleType::F32 => 4,
            SampleType::F64 => 8,
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        let n = bytes.len() / self.size();
        let mut out = Vec::with_capacity(n);
        for c in bytes.chunks_exact(self.size()) {
            out.push(match self {
                SampleType::I8 => c[0] as i8 as f64,
                SampleType::U8 => c[0] as f64,
                SampleType::I16 => LittleEndian::read_i16(c) as f64,
                SampleType::U16 => LittleEndian::read_u16(c) as f64,
                SampleType::I32 => LittleEndian::read_i32(c) as f64,
                SampleType::U32 => LittleEndian::read_u32(c) as f64,
                SampleType::F32 => LittleEndian::read_f32(c) as f64,
                SampleType::F64 => LittleEndian::read_f64(c),
            });
        }
        out
    }
}

/// Loads a volume, dispatching on extension (`.raw`/`.meta` → sidecar pair,
/// anything else → NRRD).
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("raw") | Some("meta") => load_raw_meta(path),
        _ => load_nrrd(path),
    }
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    save_volume_with(v, path, Encoding::Raw)
}

pub fn save_volume_with(v: &Volume, path: impl AsRef<Path>, encoding: Encoding) -> Result<()> {
    let path = path.as_ref();
    let g = v.geometry();
    let mut header = String::new();
    header.push_str("NRRD0004\n");
    header.push_str("type: double\n");
    header.push_str("dimension: 3\n");
    header.push_str("space dimension: 3\n");
    header.push_str(&format!("sizes: {} {} {}\n", g.dims[0], g.dims[1], g.dims[2]));
    header.push_str(&format!(
        "space directions: ({},0,0) (0,{},0) (0,0,{})\n",
        g.spacing[0], g.spacing[1], g.spacing[2]
    ));
    header.push_str("kinds: domain domain domain\n");
    header.push_str("endian: little\n");
    header.push_str(match encoding {
        Encoding::Raw => "encoding: raw\n",
        Encoding::Gzip => "encoding: gzip\n",
    });
    header.push_str(&format!(
        "space origin: ({},{},{})\n\n",
        g.origin[0], g.origin[1], g.origin[2]
    ));

    let mut body = vec![0u8; v.len() * 8];
    LittleEndian::write_f64_into(v.data(), &mut body);
    let body = match encoding {
        Encoding::Raw => body,
        Encoding::Gzip => {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&body).map_err(|e| Error::io(path, e))?;
            enc.finish().map_err(|e| Error::io(path, e))?
        }
    };
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&body);
    write_atomic(path, &bytes)
}

/// Writes through a temporary file in the destination directory and renames it
/// into place, so a failed write leaves nothing behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    sample: SampleType,
    gzip: bool,
}

fn load_nrrd(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(b"NRRD") {
        return Err(Error::format(path, "missing NRRD magic"));
    }
    // header ends at the first empty line
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|e| pos + e)
            .ok_or_else(|| Error::corrupt(path, "unterminated header"))?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| Error::corrupt(path, "header is not UTF-8"))?
            .trim_end_matches('\r')
            .to_string();
        pos = end + 1;
        if line.is_empty() {
            break;
        }
        lines.push(line);
    }
    let header = parse_nrrd_header(path, &lines[1..])?;
    let payload = &bytes[pos..];
    let raw = if header.gzip {
        let mut out = Vec::new();
        GzDecoder::new(payload)
            .read_to_end(&mut out)
            .map_err(|e| Error::corrupt(path, format!("gzip payload: {e}")))?;
        out
    } else {
        payload.to_vec()
    };
    finish_volume(path, &header, &raw)
}

fn finish_volume(path: &Path, h: &Header, raw: &[u8]) -> Result<Volume> {
    let expected = h.dims[0] * h.dims[1] * h.dims[2];
    let size = h.sample.size();
    if raw.len() != expected * size {
        return Err(Error::corrupt(
            path,
            format!(
                "declared {} voxels but payload holds {} bytes ({} values)",
                expected,
                raw.len(),
                raw.len() / size
            ),
        ));
    }
    let data = h.sample.decode(raw);
    let geom = Geometry::new(h.dims, h.spacing, h.origin)
        .map_err(|e| Error::corrupt(path, e.to_string()))?;
    Volume::from_geometry(geom, data).map_err(|e| Error::corrupt(path, e.to_string()))
}

fn parse_nrrd_header(path: &Path, lines: &[String]) -> Result<Header> {
    let mut dims = None;
    let mut spacing = None;
    let mut origin = [0.0; 3];
    let mut sample = None;
    let mut gzip = false;
    for line in lines {
        if line.starts_with('#') {
            continue;
        }
        // key:=value pairs are free-form metadata
        if line.contains(":=") {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(Error::corrupt(path, format!("malformed header line {line:?}")));
        };
        let value = value.trim();
        match key.trim() {
            "type" => {
                sample = Some(SampleType::from_nrrd(value).ok_or_else(|| {
                    Error::format(path, format!("unsupported sample type {value:?}"))
                })?)
            }
            "dimension" => {
                if value != "3" {
                    return Err(Error::format(path, format!("dimension {value} (need 3)")));
                }
            }
            "sizes" => dims = Some(parse_triple::<usize>(path, value)?),
            "spacings" => spacing = Some(parse_triple::<f64>(path, value)?),
            "space directions" => spacing = Some(parse_directions(path, value)?),
            "space origin" => origin = parse_vector(path, value)?,
            "encoding" => match value {
                "raw" => gzip = false,
                "gzip" | "gz" => gzip = true,
                other => return Err(Error::format(path, format!("encoding {other:?}"))),
            },
            "endian" => {
                if value != "little" {
                    return Err(Error::format(path, format!("endian {value:?}")));
                }
            }
            "data file" | "datafile" => {
                return Err(Error::format(path, "detached data files are not supported"))
            }
            _ => {}
        }
    }
    let sample = sample.ok_or_else(|| Error::corrupt(path, "missing type field"))?;
    if sample.size() > 1 && !lines.iter().any(|l| l.starts_with("endian")) {
        return Err(Error::corrupt(path, "missing endian field"));
    }
    Ok(Header {
        dims: dims.ok_or_else(|| Error::corrupt(path, "missing sizes field"))?,
        spacing: spacing.unwrap_or([1.0; 3]),
        origin,
        sample,
        gzip,
    })
}

fn parse_triple<T: std::str::FromStr>(path: &Path, s: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = s
        .split_whitespace()
        .map(|p| p.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::corrupt(path, format!("cannot parse {s:?}")))?;
    parts
        .try_into()
        .map_err(|_| Error::corrupt(path, format!("expected 3 values in {s:?}")))
}

fn parse_vector(path: &Path, s: &str) -> Result<[f64; 3]> {
    let inner = s
        .trim()
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| Error::corrupt(path, format!("malformed vector {s:?}")))?;
    let parts: Vec<f64> = inner
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::corrupt(path, format!("cannot parse vector {s:?}")))?;
    parts
        .try_into()
        .map_err(|_| Error::corrupt(path, format!("expected 3 components in {s:?}")))
}

fn parse_directions(path: &Path, s: &str) -> Result<[f64; 3]> {
    let vecs: Vec<[f64; 3]> = s
        .split_whitespace()
        .map(|t| parse_vector(path, t))
        .collect::<Result<_>>()?;
    if vecs.len() != 3 {
        return Err(Error::corrupt(path, "space directions needs 3 vectors"));
    }
    let mut spacing = [0.0; 3];
    for (a, v) in vecs.iter().enumerate() {
        for (b, &x) in v.iter().enumerate() {
            if a != b && x != 0.0 {
                return Err(Error::format(path, "non axis-aligned space directions"));
            }
        }
        if !(v[a] > 0.0) {
            return Err(Error::format(path, "space directions must be positive"));
        }
        spacing[a] = v[a];
    }
    Ok(spacing)
}

fn load_raw_meta(path: &Path) -> Result<Volume> {
    let raw_path = path.with_extension("raw");
    let meta_path = path.with_extension("meta");
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut dims = None;
    let mut spacing = [1.0; 3];
    let mut origin = [0.0; 3];
    let mut sample = SampleType::F32;
    for line in meta.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::corrupt(&meta_path, format!("malformed line {line:?}")))?;
        let v = v.trim().replace(',', " ");
        match k.trim() {
            "dims" => dims = Some(parse_triple::<usize>(&meta_path, &v)?),
            "spacing" => spacing = parse_triple::<f64>(&meta_path, &v)?,
            "origin" => origin = parse_triple::<f64>(&meta_path, &v)?,
            "dtype" => {
                sample = SampleType::from_nrrd(v.trim()).ok_or_else(|| {
                    Error::format(&meta_path, format!("unsupported dtype {v:?}"))
                })?
            }
            _ => {}
        }
    }
    let header = Header {
        dims: dims.ok_or_else(|| Error::corrupt(&meta_path, "missing dims"))?,
        spacing,
        origin,
        sample,
        gzip: false,
    };
    let raw = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    finish_volume(&raw_path, &header, &raw)
}
