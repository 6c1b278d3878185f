//! `ARPT` tensor files.
//!
//! Layout: magic `ARPT`, version byte `0x01`, a `u8` rank, `rank` little-endian
//! `u32` dimensions, then row-major little-endian `f32` values. Dense maps are
//! stored `[H, W, C]`.

use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ARPT";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum ArptError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("truncated tensor: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after tensor data")]
    TrailingBytes(usize),
    #[error("tensor rank {0} does not fit the format")]
    RankTooLarge(usize),
    #[error("dimension {0} does not fit in u32")]
    DimTooLarge(usize),
    #[error("expected a rank-3 tensor, got rank {0}")]
    NotRank3(usize),
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: Box<ArptError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Serializes a tensor. Values are narrowed to `f32`.
pub fn to_bytes(tensor: &ArrayD<f64>) -> Result<Vec<u8>, ArptError> {
    let shape = tensor.shape();
    let rank = u8::try_from(shape.len()).map_err(|_| ArptError::RankTooLarge(shape.len()))?;
    let mut out = Vec::with_capacity(6 + 4 * shape.len() + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(rank);
    for &d in shape {
        let d32 = u32::try_from(d).map_err(|_| ArptError::DimTooLarge(d))?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    // iter() walks in logical (row-major) order regardless of memory layout
    for &v in tensor.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ArrayD<f64>, ArptError> {
    let need = |expected: usize| {
        if bytes.len() < expected {
            Err(ArptError::Truncated {
                expected,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(6)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if &magic != MAGIC {
        return Err(ArptError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(ArptError::BadVersion(bytes[4]));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    need(header)?;
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let expected = header + 4 * count;
    need(expected)?;
    if bytes.len() > expected {
        return Err(ArptError::TrailingBytes(bytes.len() - expected));
    }
    let data: Vec<f64> = bytes[header..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("shape matches element count"))
}

pub fn write_file(path: &Path, tensor: &ArrayD<f64>) -> Result<(), ArptError> {
    let bytes = to_bytes(tensor)?;
    fs::write(path, bytes).map_err(|source| ArptError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a tensor; errors name the offending file.
pub fn read_file(path: &Path) -> Result<ArrayD<f64>, ArptError> {
    let bytes = fs::read(path).map_err(|source| ArptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes).map_err(|e| ArptError::File {
        path: path.display().to_string(),
        source: Box::new(e),
    })
}

pub fn write_map(path: &Path, map: &Array3<f64>) -> Result<(), ArptError> {
    write_file(path, &map.clone().into_dyn())
}

pub fn read_map(path: &Path) -> Result<Array3<f64>, ArptError> {
    let t = read_file(path)?;
    let rank = t.ndim();
    t.into_dimensionality().map_err(|_| ArptError::File {
        path: path.display().to_string(),
        source: Box::new(ArptError::NotRank3(rank)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Array3::from_shape_vec((1, 2, 1), vec![1.0, -2.5]).unwrap().into_dyn();
        let b = to_bytes(&t).unwrap();
        assert_eq!(&b[..6], b"ARPT\x01\x03");
        assert_eq!(&b[6..18], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[18..22], &1.0f32.to_le_bytes());
        assert_eq!(&b[22..26], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 26);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let t = Array3::<f64>::zeros((2, 2, 1)).into_dyn();
        let mut b = to_bytes(&t).unwrap();
        b[4] = 2;
        assert!(matches!(from_bytes(&b), Err(ArptError::BadVersion(2))));
        b[0] = b'X';
        assert!(matches!(from_bytes(&b), Err(ArptError::BadMagic(_))));
    }

    #[test]
    fn rejects_truncation_and_trailing() {
        let t = Array3::<f64>::zeros((2, 2, 1)).into_dyn();
        let b = to_bytes(&t).unwrap();
        assert!(matches!(
            from_bytes(&b[..b.len() - 1]),
            Err(ArptError::Truncated { .. })
        ));
        assert!(matches!(from_bytes(&b[..3]), Err(ArptError::Truncated { .. })));
        let mut longer = b.clone();
        longer.push(0);
        assert!(matches!(from_bytes(&longer), Err(ArptError::TrailingBytes(1))));
    }

    #[test]
    fn read_error_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.arpt");
        std::fs::write(&p, b"NOPE\x01\x00").unwrap();
        let msg = read_file(&p).unwrap_err().to_string();
        assert!(msg.contains("bad.arpt"), "{msg}");
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in any::<u32>()) {
            let n = h * w * c;
            let data: Vec<f64> = (0..n).map(|i| (((seed as usize + i * 7919) % 1000) as f32 * 0.37 - 150.0) as f64).collect();
            let t = Array3::from_shape_vec((h, w, c), data).unwrap().into_dyn();
            prop_assert_eq!(from_bytes(&to_bytes(&t).unwrap()).unwrap(), t);
        }
    }
}
