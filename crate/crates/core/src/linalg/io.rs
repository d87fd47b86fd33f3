//! Matrix serialization.
//!
//! Binary container, all integers little-endian:
//!
//! ```text
//! offset  size       field
//! 0       8          magic  b"SKCMTX01"
//! 8       4          rows   u32
//! 12      4          cols   u32
//! 16      8·rows·cols payload, f64 row-major
//! ```
//!
//! A *matrix stream* is zero or more containers back to back. The CSV form is
//! one matrix row per line, comma separated, no header.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::Matrix;

pub const MATRIX_MAGIC: [u8; 8] = *b"SKCMTX01";
pub const HEADER_LEN: usize = 16;

/// Upper bound on entries accepted from a container (2 GiB of payload).
pub const MAX_ENTRIES: usize = 1 << 28;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic at byte {offset}")]
    BadMagic { offset: usize },
    #[error("truncated container at byte {offset}: need {needed} bytes, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("container at byte {offset} declares empty shape {rows}x{cols}")]
    EmptyShape {
        offset: usize,
        rows: usize,
        cols: usize,
    },
    #[error("container at byte {offset} declares {rows}x{cols}, above the {MAX_ENTRIES}-entry limit")]
    TooLarge {
        offset: usize,
        rows: usize,
        cols: usize,
    },
    #[error("non-finite entry at byte {offset}")]
    NonFinite { offset: usize },
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for FormatError {
    fn from(e: std::io::Error) -> Self {
        FormatError::Io(e.to_string())
    }
}

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    write_matrix(&mut out, m).expect("writing to a Vec cannot fail");
    out
}

pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> std::io::Result<()> {
    let rows = u32::try_from(m.rows()).map_err(std::io::Error::other)?;
    let cols = u32::try_from(m.cols()).map_err(std::io::Error::other)?;
    w.write_all(&MATRIX_MAGIC)?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Decodes one container from the front of `bytes`, returning the matrix and
/// the number of bytes consumed.
pub fn decode_matrix(bytes: &[u8]) -> Result<(Matrix, usize), FormatError> {
    decode_at(bytes, 0)
}

fn decode_at(bytes: &[u8], base: usize) -> Result<(Matrix, usize), FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            offset: base,
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    if bytes[..8] != MATRIX_MAGIC {
        return Err(FormatError::BadMagic { offset: base });
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(FormatError::EmptyShape {
            offset: base,
            rows,
            cols,
        });
    }
    let entries = rows
        .checked_mul(cols)
        .filter(|&e| e <= MAX_ENTRIES)
        .ok_or(FormatError::TooLarge {
            offset: base,
            rows,
            cols,
        })?;
    let total = HEADER_LEN + 8 * entries;
    if bytes.len() < total {
        return Err(FormatError::Truncated {
            offset: base,
            needed: total,
            available: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(entries);
    for (k, chunk) in bytes[HEADER_LEN..total].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FormatError::NonFinite {
                offset: base + HEADER_LEN + 8 * k,
            });
        }
        data.push(v);
    }
    Ok((Matrix::from_raw(rows, cols, data), total))
}

pub fn encode_matrices(ms: &[Matrix]) -> Vec<u8> {
    let mut out = Vec::new();
    for m in ms {
        write_matrix(&mut out, m).expect("writing to a Vec cannot fail");
    }
    out
}

/// Decodes a matrix stream. Errors carry absolute byte offsets.
pub fn decode_matrices(bytes: &[u8]) -> Result<Vec<Matrix>, FormatError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (m, used) = decode_at(&bytes[pos..], pos)?;
        out.push(m);
        pos += used;
    }
    Ok(out)
}

pub fn read_matrices(path: &Path) -> Result<Vec<Matrix>, FormatError> {
    decode_matrices(&fs::read(path)?)
}

pub fn write_matrices(path: &Path, ms: &[Matrix]) -> Result<(), FormatError> {
    fs::write(path, encode_matrices(ms))?;
    Ok(())
}

pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut s = String::new();
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn matrix_from_csv(text: &str) -> Result<Matrix, FormatError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut cols = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| FormatError::Csv {
            line,
            message: e.to_string(),
        })?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(FormatError::Csv {
                    line,
                    message: format!("expected {c} fields, found {}", record.len()),
                })
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| FormatError::Csv {
                line,
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(FormatError::Csv {
                    line,
                    message: format!("non-finite value {field:?}"),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or(FormatError::Csv {
        line: 0,
        message: "no rows".into(),
    })?;
    Ok(Matrix::from_raw(rows, cols, data))
}
