//! The activation interchange file.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `ACTV`                            |
//! | 4      | 4    | version, `u32` = 1                      |
//! | 8      | 4    | dtype, `u32` (1 = f32 little-endian)    |
//! | 12     | 8    | n, `u64` (rows)                         |
//! | 20     | 8    | d, `u64` (columns)                      |
//! | 28     | 4·n·d| values, row-major                       |
//!
//! Labels live next to the file in `<file>.labels`, one UTF-8 label per
//! line, with `\` written as `\\`, newline as `\n` and carriage return as
//! `\r`. Sidecar metadata is a flat JSON object in `<file>.json`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{normalize_dictionary, ActivationSet, CoefficientSet, Dictionary};

pub const MAGIC: [u8; 4] = *b"ACTV";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const HEADER_LEN: usize = 28;

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = OsString::from(path.as_os_str());
    name.push(suffix);
    PathBuf::from(name)
}

pub fn labels_path(path: &Path) -> PathBuf {
    sibling(path, ".labels")
}

pub fn metadata_path(path: &Path) -> PathBuf {
    sibling(path, ".json")
}

/// Serializes the matrix (labels are not part of the byte stream).
pub fn encode_activations(x: &ActivationSet) -> Result<Vec<u8>> {
    let (n, d) = (x.n(), x.d());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * d);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for &v in x.data().iter() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::InvalidActivations(format!("value {v} does not fit in f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

/// Parses a byte stream produced by [`encode_activations`].
pub fn decode_activations(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = u32_at(bytes, 8);
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let (n, d) = (u64_at(bytes, 12), u64_at(bytes, 20));
    let payload = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::InvalidActivations(format!("n = {n}, d = {d} overflows")))?;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < payload {
        return Err(Error::Truncated {
            expected: payload,
            found,
        });
    }
    if found > payload {
        return Err(Error::TrailingBytes {
            expected: payload,
            extra: found - payload,
        });
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((n as usize, d as usize), values)
        .map_err(|e| Error::InvalidActivations(e.to_string()))
}

fn escape_label(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    for ch in label.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_label(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

pub fn encode_labels(labels: &[String]) -> String {
    let mut out = String::new();
    for l in labels {
        out.push_str(&escape_label(l));
        out.push('\n');
    }
    out
}

pub fn decode_labels(text: &str) -> Vec<String> {
    text.lines().map(unescape_label).collect()
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Writes the matrix and, when present, its labels. A stale label file
/// from an earlier write is removed when `x` is unlabeled.
pub fn write_activations(path: &Path, x: &ActivationSet) -> Result<()> {
    write_atomic(path, &encode_activations(x)?)?;
    let lpath = labels_path(path);
    match x.labels() {
        Some(labels) => write_atomic(&lpath, encode_labels(labels).as_bytes())?,
        None if lpath.exists() => fs::remove_file(&lpath)?,
        None => {}
    }
    Ok(())
}

pub fn read_activations(path: &Path) -> Result<ActivationSet> {
    let data = decode_activations(&fs::read(path)?)?;
    let lpath = labels_path(path);
    if lpath.exists() {
        let labels = decode_labels(&fs::read_to_string(&lpath)?);
        ActivationSet::with_labels(data, labels)
    } else {
        ActivationSet::new(data)
    }
}

/// Flat JSON metadata stored beside an activation file. Keys this crate
/// does not know about are carried through untouched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sidecar {
    pub fields: Map<String, Value>,
}

impl Sidecar {
    pub fn model(&self) -> Option<&str> {
        self.fields.get("model").and_then(Value::as_str)
    }

    pub fn layer(&self) -> Option<i64> {
        self.fields.get("layer").and_then(Value::as_i64)
    }

    pub fn corpus(&self) -> Option<&str> {
        self.fields.get("corpus").and_then(Value::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.fields.insert(key.to_string(), value.into());
    }
}

pub fn read_metadata(path: &Path) -> Result<Option<Sidecar>> {
    let mpath = metadata_path(path);
    if !mpath.exists() {
        return Ok(None);
    }
    let value: Value = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
    match value {
        Value::Object(fields) => Ok(Some(Sidecar { fields })),
        _ => Err(Error::Parse {
            path: mpath,
            line: 1,
            message: "sidecar metadata must be a JSON object".into(),
        }),
    }
}

pub fn write_metadata(path: &Path, sidecar: &Sidecar) -> Result<()> {
    let text = serde_json::to_string_pretty(&Value::Object(sidecar.fields.clone()))?;
    write_atomic(&metadata_path(path), text.as_bytes())
}

/// Stores a dictionary as an activation file with one feature per row.
pub fn write_dictionary(path: &Path, dict: &Dictionary) -> Result<()> {
    let rows = ActivationSet::new(dict.feature_rows().to_owned())?;
    write_atomic(path, &encode_activations(&rows)?)
}

/// Reads a dictionary written by [`write_dictionary`], renormalizing the
/// f32-rounded columns.
pub fn read_dictionary(path: &Path) -> Result<Dictionary> {
    let rows = decode_activations(&fs::read(path)?)?;
    normalize_dictionary(rows.reversed_axes())
}

/// Sparse triplet text: a header line `m n nnz`, then one
/// `feature activation value` line per stored coefficient.
pub fn encode_coefficients(coeffs: &CoefficientSet) -> String {
    let mut out = format!("{} {} {}\n", coeffs.m(), coeffs.n(), coeffs.nnz());
    for (j, col) in coeffs.columns().enumerate() {
        for &(i, v) in col {
            out.push_str(&format!("{i} {j} {v}\n"));
        }
    }
    out
}

pub fn decode_coefficients(text: &str, path: &Path) -> Result<CoefficientSet> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| err(1, format!("bad header: {e}")))?;
    let [m, n, nnz] = head[..] else {
        return Err(err(1, format!("expected `m n nnz`, got {header:?}")));
    };
    let mut columns = vec![Vec::new(); n];
    let mut count = 0;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parsed = (|| {
            let i: usize = parts.next()?.parse().ok()?;
            let j: usize = parts.next()?.parse().ok()?;
            let v: f64 = parts.next()?.parse().ok()?;
            parts.next().is_none().then_some((i, j, v))
        })();
        let (i, j, v) = parsed.ok_or_else(|| err(idx + 1, format!("expected `feature activation value`, got {line:?}")))?;
        if j >= n {
            return Err(err(idx + 1, format!("activation index {j} out of range 0..{n}")));
        }
        columns[j].push((i, v));
        count += 1;
    }
    if count != nnz {
        return Err(err(1, format!("header promises {nnz} entries, found {count}")));
    }
    CoefficientSet::new(m, columns)
}

pub fn write_coefficients(path: &Path, coeffs: &CoefficientSet) -> Result<()> {
    write_atomic(path, encode_coefficients(coeffs).as_bytes())
}

pub fn read_coefficients(path: &Path) -> Result<CoefficientSet> {
    decode_coefficients(&fs::read_to_string(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn header_layout() {
        let x = ActivationSet::new(array![[1.0, -2.5]]).unwrap();
        let bytes = encode_activations(&x).unwrap();
        assert_eq!(&bytes[..4], b"ACTV");
        assert_eq!(bytes[4..8], [1, 0, 0, 0]);
        assert_eq!(bytes[8..12], [1, 0, 0, 0]);
        assert_eq!(bytes[12..20], 1u64.to_le_bytes());
        assert_eq!(bytes[20..28], 2u64.to_le_bytes());
        assert_eq!(bytes[28..32], 1.0f32.to_le_bytes());
        assert_eq!(bytes[32..36], (-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 36);
    }

    #[test]
    fn decode_errors() {
        let x = ActivationSet::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let good = encode_activations(&x).unwrap();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_activations(&bad), Err(Error::BadMagic(m)) if &m == b"XXXX"));

        assert!(matches!(
            decode_activations(&good[..good.len() - 4]),
            Err(Error::Truncated { expected: 16, found: 12 })
        ));
        assert!(matches!(decode_activations(&good[..10]), Err(Error::Truncated { .. })));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_activations(&long), Err(Error::TrailingBytes { extra: 1, .. })));

        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode_activations(&v2), Err(Error::UnsupportedVersion(2))));

        let mut f64_dtype = good;
        f64_dtype[8] = 2;
        assert!(matches!(decode_activations(&f64_dtype), Err(Error::UnsupportedDtype(2))));
    }

    #[test]
    fn rejects_values_outside_f32() {
        let x = ActivationSet::new(array![[1e300]]).unwrap();
        assert!(encode_activations(&x).is_err());
    }

    #[test]
    fn label_escaping() {
        let labels = vec!["plain".to_string(), "two\nlines".into(), "back\\slash".into(), "\r".into(), "".into()];
        assert_eq!(decode_labels(&encode_labels(&labels)), labels);
    }

    #[test]
    fn coefficient_text() {
        let c = CoefficientSet::new(4, vec![vec![(3, 0.25), (1, 1.5)], vec![], vec![(0, 1e-9)]]).unwrap();
        let text = encode_coefficients(&c);
        assert!(text.starts_with("4 3 3\n"));
        assert_eq!(decode_coefficients(&text, Path::new("mem")).unwrap(), c);
        assert!(decode_coefficients("4 3 2\n0 0 1.0\n", Path::new("mem")).is_err());
        assert!(decode_coefficients("4 1 1\n0 5 1.0\n", Path::new("mem")).is_err());
        assert!(decode_coefficients("4 1 1\n0 0 -1.0\n", Path::new("mem")).is_err());
    }
}
