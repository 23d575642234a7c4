//! `FDMP1` tensor dumps for analyzing externally produced embeddings.
//!
//! ```text
//! b"FDMP1" | u32 ndim | u64 dim × ndim | f32 × Π dims
//! ```
//! All little-endian, data row-major. A 2-D dump is read as `B × D`; a 3-D dump
//! `(B, M, d)` is arranged per [`BatchLayout`].

use std::fs;
use std::path::Path;

use super::{BatchEmbeddingMatrix, BatchLayout, DiagnosticsError};

pub const MAGIC: &[u8; 5] = b"FDMP1";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorDump {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorDump {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(9 + self.shape.len() * 8 + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DiagnosticsError> {
        let bad = |m: &str| DiagnosticsError::InvalidMatrix(format!("FDMP1: {m}"));
        if bytes.len() < 9 || &bytes[..5] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let ndim = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let dims_end = 9 + ndim * 8;
        if bytes.len() < dims_end {
            return Err(bad("truncated shape"));
        }
        let shape: Vec<usize> = bytes[9..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect();
        let count: usize = shape.iter().product();
        if bytes.len() != dims_end + count * 4 {
            return Err(bad("data length does not match declared shape"));
        }
        let data = bytes[dims_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn read(path: &Path) -> Result<Self, DiagnosticsError> {
        let bytes = fs::read(path).map_err(|e| {
            DiagnosticsError::InvalidMatrix(format!("reading {}: {e}", path.display()))
        })?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.encode())
    }

    pub fn to_batch(&self, layout: BatchLayout) -> Result<BatchEmbeddingMatrix, DiagnosticsError> {
        let values: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        match (self.shape.as_slice(), layout) {
            ([b, d], _) => BatchEmbeddingMatrix::new(*b, *d, values),
            ([b, m, d], BatchLayout::Flatten) => BatchEmbeddingMatrix::new(*b, m * d, values),
            ([b, m, d], BatchLayout::Stack) => BatchEmbeddingMatrix::new(b * m, *d, values),
            _ => Err(DiagnosticsError::InvalidMatrix(format!(
                "unsupported dump rank {}",
                self.shape.len()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layouts() {
        let dump = TensorDump {
            shape: vec![2, 3, 4],
            data: (0..24).map(|v| v as f32).collect(),
        };
        let back = TensorDump::decode(&dump.encode()).unwrap();
        assert_eq!(back, dump);
        let flat = back.to_batch(BatchLayout::Flatten).unwrap();
        assert_eq!((flat.rows(), flat.cols()), (2, 12));
        let stacked = back.to_batch(BatchLayout::Stack).unwrap();
        assert_eq!((stacked.rows(), stacked.cols()), (6, 4));
    }

    #[test]
    fn rejects_bad_lengths() {
        let mut bytes = TensorDump {
            shape: vec![2, 2],
            data: vec![1.0; 4],
        }
        .encode();
        bytes.pop();
        assert!(TensorDump::decode(&bytes).is_err());
        assert!(TensorDump::decode(b"FDMP0\0\0\0\0").is_err());
    }
}
