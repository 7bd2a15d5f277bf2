//! `LATV v1` vector store.
//!
//! Layout (all integers little-endian):
//!
//! | bytes  | content                     |
//! |--------|-----------------------------|
//! | 0..4   | magic `LATV`                |
//! | 4..8   | version, `u32` = 1          |
//! | 8..12  | row count, `u32`            |
//! | 12..16 | dimension, `u32`            |
//! | 16..   | count × dim `f32`, row-major |
//!
//! Decoding is strict: every malformed input maps to a [`LatvError`].

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"LATV";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LatvError {
    #[error("file too short for header: {len} bytes")]
    TruncatedHeader { len: usize },
    #[error("bad magic {found:?}, expected \"LATV\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("zero dimension with {count} rows")]
    ZeroDimension { count: u32 },
    #[error("payload size overflows: {count} rows x {dim} dims")]
    Overflow { count: u32, dim: u32 },
    #[error("payload length {found} bytes, header requires {expected}")]
    LengthMismatch { expected: u64, found: u64 },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("row {row} has {found} values, table dimension is {expected}")]
    RowDimension {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{what} {value} does not fit in u32")]
    TooLarge { what: &'static str, value: usize },
}

/// Dense row-major table of equal-length vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorTable<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> VectorTable<T> {
    pub fn new(dim: usize) -> Self {
        VectorTable {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows<R: AsRef<[T]>>(dim: usize, rows: &[R]) -> Result<Self, LatvError> {
        let mut table = VectorTable::new(dim);
        for row in rows {
            table.push(row.as_ref())?;
        }
        Ok(table)
    }

    pub fn push(&mut self, row: &[T]) -> Result<usize, LatvError> {
        if row.len() != self.dim {
            return Err(LatvError::RowDimension {
                row: self.len(),
                expected: self.dim,
                found: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(self.len() - 1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, index: usize) -> Option<&[T]> {
        if index >= self.len() {
            return None;
        }
        Some(&self.data[index * self.dim..(index + 1) * self.dim])
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on 0; an empty table has no rows either way
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn encode(&self) -> Result<Vec<u8>, LatvError> {
        let count = u32::try_from(self.len()).map_err(|_| LatvError::TooLarge {
            what: "row count",
            value: self.len(),
        })?;
        let dim = u32::try_from(self.dim).map_err(|_| LatvError::TooLarge {
            what: "dimension",
            value: self.dim,
        })?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        for (i, v) in self.data.iter().enumerate() {
            let narrowed = v.as_f64() as f32;
            if !narrowed.is_finite() {
                return Err(LatvError::NonFinite {
                    row: i / self.dim,
                    col: i % self.dim,
                });
            }
            out.extend_from_slice(&narrowed.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LatvError> {
        let header: &[u8; HEADER_LEN] = bytes
            .get(..HEADER_LEN)
            .and_then(|h| h.try_into().ok())
            .ok_or(LatvError::TruncatedHeader { len: bytes.len() })?;
        let word = |i: usize| u32::from_le_bytes([header[i], header[i + 1], header[i + 2], header[i + 3]]);

        let magic = [header[0], header[1], header[2], header[3]];
        if magic != MAGIC {
            return Err(LatvError::BadMagic { found: magic });
        }
        let version = word(4);
        if version != VERSION {
            return Err(LatvError::UnsupportedVersion(version));
        }
        let count = word(8);
        let dim = word(12);
        if dim == 0 && count > 0 {
            return Err(LatvError::ZeroDimension { count });
        }
        let expected = (count as u64)
            .checked_mul(dim as u64)
            .and_then(|n| n.checked_mul(4))
            .ok_or(LatvError::Overflow { count, dim })?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() as u64 != expected {
            return Err(LatvError::LengthMismatch {
                expected,
                found: payload.len() as u64,
            });
        }

        let dim = dim as usize;
        let mut data = Vec::with_capacity(payload.len() / 4);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(LatvError::NonFinite {
                    row: i / dim,
                    col: i % dim,
                });
            }
            data.push(T::of(v as f64));
        }
        Ok(VectorTable { dim, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|source| Error::Format {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode().map_err(|source| Error::Format {
            path: path.to_path_buf(),
            source,
        })?;
        fsutil::write_atomic(path, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(count: u32, dim: u32) -> Vec<u8> {
        let mut h = MAGIC.to_vec();
        h.extend_from_slice(&1u32.to_le_bytes());
        h.extend_from_slice(&count.to_le_bytes());
        h.extend_from_slice(&dim.to_le_bytes());
        h
    }

    #[test]
    fn known_bytes() {
        let t = VectorTable::<f64>::from_rows(2, &[[1.0, -2.0]]).unwrap();
        let bytes = t.encode().unwrap();
        assert_eq!(&bytes[..4], b"LATV");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &(-2.0f32).to_le_bytes());
        assert_eq!(VectorTable::<f64>::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn empty_table() {
        let bytes = header(0, 32);
        let t = VectorTable::<f32>::decode(&bytes).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.dim(), 32);
        assert_eq!(t.rows().count(), 0);
    }

    #[test]
    fn structured_errors() {
        assert_eq!(
            VectorTable::<f32>::decode(b"LAT").unwrap_err(),
            LatvError::TruncatedHeader { len: 3 }
        );
        let mut bad = header(0, 1);
        bad[0] = b'X';
        assert!(matches!(
            VectorTable::<f32>::decode(&bad),
            Err(LatvError::BadMagic { .. })
        ));
        let mut v2 = header(0, 1);
        v2[4] = 2;
        assert_eq!(
            VectorTable::<f32>::decode(&v2).unwrap_err(),
            LatvError::UnsupportedVersion(2)
        );
        assert_eq!(
            VectorTable::<f32>::decode(&header(2, 0)).unwrap_err(),
            LatvError::ZeroDimension { count: 2 }
        );
        let mut short = header(2, 2);
        short.extend_from_slice(&[0u8; 12]);
        assert_eq!(
            VectorTable::<f32>::decode(&short).unwrap_err(),
            LatvError::LengthMismatch {
                expected: 16,
                found: 12
            }
        );
        let mut nan = header(1, 1);
        nan.extend_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(
            VectorTable::<f32>::decode(&nan).unwrap_err(),
            LatvError::NonFinite { row: 0, col: 0 }
        );
        assert_eq!(
            VectorTable::<f32>::decode(&header(u32::MAX, u32::MAX)).unwrap_err(),
            LatvError::Overflow {
                count: u32::MAX,
                dim: u32::MAX
            }
        );
        assert!(matches!(
            VectorTable::<f32>::decode(&header(u32::MAX, 2)),
            Err(LatvError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn write_rejects_values_outside_f32() {
        let t = VectorTable::<f64>::from_rows(1, &[[1e300]]).unwrap();
        assert_eq!(t.encode().unwrap_err(), LatvError::NonFinite { row: 0, col: 0 });
    }

    #[test]
    fn push_checks_dimension() {
        let mut t = VectorTable::<f64>::new(3);
        assert!(matches!(
            t.push(&[1.0]),
            Err(LatvError::RowDimension { expected: 3, found: 1, .. })
        ));
    }
}
