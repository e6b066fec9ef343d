//! Named-matrix container, the bulk numeric file format.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "FDT1" count { name_len name_utf8 rows cols f32[rows * cols] }*
//! ```
//!
//! Values are row-major IEEE-754 single precision. The file must end exactly
//! after the last matrix and names must be unique.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{FdtError, Result};
use crate::grid::Matrix;

pub const MAGIC: &[u8; 4] = b"FDT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatrixContainer {
    entries: Vec<(String, Matrix)>,
}

impl MatrixContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a matrix; values are stored at single precision.
    pub fn push(&mut self, name: impl Into<String>, matrix: Matrix) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(FdtError::Format(format!("duplicate matrix name {name:?}")));
        }
        if u32::try_from(matrix.rows()).is_err() || u32::try_from(matrix.cols()).is_err() {
            return Err(FdtError::Format(format!("matrix {name:?} too large")));
        }
        self.entries.push((name, matrix));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name).ok_or_else(|| FdtError::Format(format!("missing matrix {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.entries.iter().map(|(n, m)| 12 + n.len() + 4 * m.rows() * m.cols()).sum();
        let mut out = Vec::with_capacity(8 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, m) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for &v in m.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = Reader { bytes, pos: 0 };
        if reader.take(4)? != MAGIC {
            return Err(FdtError::Format("bad magic, expected FDT1".into()));
        }
        let count = reader.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = reader.u32()? as usize;
            let name = std::str::from_utf8(reader.take(name_len)?)
                .map_err(|_| FdtError::Format("matrix name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(FdtError::Format(format!("duplicate matrix name {name:?}")));
            }
            let rows = reader.u32()? as usize;
            let cols = reader.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| FdtError::Format("matrix size overflows".into()))?;
            let raw = reader.take(n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            entries.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if reader.pos != bytes.len() {
            return Err(FdtError::Format(format!("{} trailing bytes", bytes.len() - reader.pos)));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            FdtError::Format(format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_arithmetic() {
        let mut c = MatrixContainer::new();
        c.push("w", Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
        c.push("b", Matrix::zeros(1, 3)).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(bytes.len(), 8 + (12 + 1 + 16) + (12 + 1 + 12));
        assert_eq!(&bytes[..4], b"FDT1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(MatrixContainer::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn rejects_malformed() {
        let mut c = MatrixContainer::new();
        c.push("x", Matrix::zeros(2, 2)).unwrap();
        let bytes = c.to_bytes();
        assert!(MatrixContainer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(MatrixContainer::from_bytes(&long).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(MatrixContainer::from_bytes(&bad).is_err());
        assert!(c.push("x", Matrix::zeros(1, 1)).is_err());
    }

    proptest! {
        #[test]
        fn single_precision_values_round_trip(
            rows in 0usize..5,
            cols in 0usize..5,
            seed in proptest::collection::vec(-1e6f32..1e6, 25),
            name in "[a-z_/0-9]{1,12}",
        ) {
            let data: Vec<f64> = seed.iter().take(rows * cols).map(|&v| v as f64).collect();
            let mut c = MatrixContainer::new();
            c.push(name.clone(), Matrix::from_vec(rows, cols, data).unwrap()).unwrap();
            let back = MatrixContainer::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
