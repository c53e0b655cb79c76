//! Dense matrix file formats.
//!
//! Binary layout: an 8-byte little-endian header holding two `u32` values
//! (rows, cols) followed by `rows * cols` little-endian IEEE-754 doubles in
//! row-major order. CSV export writes one matrix row per line using the
//! shortest decimal representation that round-trips.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn encode_binary(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.nrows())
        .map_err(|_| Error::Format(format!("row count {} exceeds u32", m.nrows())))?;
    let cols = u32::try_from(m.ncols())
        .map_err(|_| Error::Format(format!("column count {} exceeds u32", m.ncols())))?;
    let mut out = Vec::with_capacity(8 + 8 * m.len());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_binary(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < 8 {
        return Err(Error::Format("truncated header".into()));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + 8 * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} bytes for a {rows}x{cols} matrix, found {}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_binary(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let bytes = encode_binary(m)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_binary(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_binary(&bytes)
}

pub fn to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn from_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::Format(format!("line {}: cannot parse {s:?}: {e}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format(format!(
                    "line {}: expected {} columns, found {}",
                    lineno + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn write_csv(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, to_csv(m))?;
    Ok(())
}
