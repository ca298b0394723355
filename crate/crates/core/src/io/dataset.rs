//! Binary and CSV trial storage.
//!
//! Binary layout, all little-endian:
//!
//! | field        | type         |
//! |--------------|--------------|
//! | magic        | `b"ADM1"`    |
//! | version      | `u16`        |
//! | R, D, T      | `u32` each   |
//! | bin width    | `f64` (s)    |
//! | region count | `u32`        |
//! | region dims  | `u32` each   |
//! | payload      | `R·D·T` `f64`, trial-major, then channel, then time |

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{AdmError, Result};
use crate::model::TrialSet;

pub const MAGIC: [u8; 4] = *b"ADM1";
pub const DATASET_VERSION: u16 = 1;

pub fn encode_dataset(set: &TrialSet) -> Result<Vec<u8>> {
    set.validate()?;
    let (r, d, t) = (set.len(), set.obs_dim(), set.bins());
    let as_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| AdmError::DimensionMismatch(format!("{what} = {v} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(30 + 4 * set.region_dims.len() + 8 * r * d * t);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for (v, what) in [(r, "R"), (d, "D"), (t, "T")] {
        out.extend_from_slice(&as_u32(v, what)?.to_le_bytes());
    }
    out.extend_from_slice(&set.bin_width.to_le_bytes());
    out.extend_from_slice(&as_u32(set.region_dims.len(), "region count")?.to_le_bytes());
    for &dim in &set.region_dims {
        out.extend_from_slice(&as_u32(dim, "region dim")?.to_le_bytes());
    }
    for trial in &set.trials {
        for ch in 0..d {
            for b in 0..t {
                out.extend_from_slice(&trial[(ch, b)].to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AdmError::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<TrialSet> {
    let mut rd = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = rd.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(AdmError::BadMagic {
            found: magic,
            expected: MAGIC,
        });
    }
    let version = rd.u16()?;
    if version != DATASET_VERSION {
        return Err(AdmError::UnsupportedVersion {
            found: version as u32,
            supported: DATASET_VERSION as u32,
        });
    }
    let (r, d, t) = (rd.u32()?, rd.u32()?, rd.u32()?);
    let bin_width = rd.f64()?;
    let regions = rd.u32()?;
    let region_dims = (0..regions).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
    let sum: usize = region_dims.iter().sum();
    if sum != d {
        return Err(AdmError::DimensionMismatch(format!(
            "region dims {region_dims:?} sum to {sum}, header says D = {d}"
        )));
    }
    let payload = r
        .checked_mul(d)
        .and_then(|v| v.checked_mul(t))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| AdmError::Malformed(format!("R·D·T overflows ({r}, {d}, {t})")))?;
    let expected = rd.pos + payload;
    if bytes.len() < expected {
        return Err(AdmError::Truncated {
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes.len() > expected {
        return Err(AdmError::Malformed(format!(
            "{} trailing bytes after the payload",
            bytes.len() - expected
        )));
    }
    let mut trials = Vec::with_capacity(r);
    for _ in 0..r {
        let mut m = DMatrix::zeros(d, t);
        for ch in 0..d {
            for b in 0..t {
                m[(ch, b)] = rd.f64()?;
            }
        }
        trials.push(m);
    }
    TrialSet::new(trials, bin_width, region_dims)
}

pub fn save_dataset(set: &TrialSet, path: &Path) -> Result<()> {
    let bytes = encode_dataset(set)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<TrialSet> {
    decode_dataset(&fs::read(path)?)
}

/// One headerless CSV per trial, `D` rows of `T` values.
pub fn load_csv_trials(paths: &[&Path], bin_width: f64, region_dims: Vec<usize>) -> Result<TrialSet> {
    let trials = paths
        .iter()
        .map(|p| read_csv_matrix(p))
        .collect::<Result<Vec<_>>>()?;
    TrialSet::new(trials, bin_width, region_dims)
}

fn read_csv_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| AdmError::Malformed(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| AdmError::Malformed(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    AdmError::Malformed(format!("{} row {}: `{s}` is not a number", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, |r| r.len());
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Write one trial as a headerless CSV.
pub fn write_csv_matrix(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| AdmError::Malformed(e.to_string()))?;
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        w.write_record(&row).map_err(|e| AdmError::Malformed(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
