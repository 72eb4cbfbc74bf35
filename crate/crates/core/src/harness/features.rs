//! Binary feature files.
//!
//! Layout: magic `IPCFEAT1`, rank as u64 LE, one u64 LE per dimension, a
//! dtype tag u64 LE (`1` = f32), then the values row-major as f32 LE.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{io_at, Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"IPCFEAT1";
pub const DTYPE_F32: u64 = 1;

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

pub fn encode_features(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(40 + 4 * t.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&2u64.to_le_bytes());
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Reads a rank-1 or rank-2 file; rank 1 becomes a single row.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| format_err(path, "truncated header"))?;
    if &magic != FEATURE_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let mut word = || -> Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|_| format_err(path, "truncated header"))?;
        Ok(u64::from_le_bytes(b))
    };
    let rank = word()?;
    let shape: Vec<u64> = (0..rank.min(3)).map(|_| word()).collect::<Result<_>>()?;
    let (rows, cols) = match shape.as_slice() {
        [n] => (1, *n as usize),
        [n, d] => (*n as usize, *d as usize),
        _ => return Err(format_err(path, format!("unsupported rank {rank}"))),
    };
    let dtype = word()?;
    if dtype != DTYPE_F32 {
        return Err(format_err(path, format!("unsupported dtype tag {dtype}")));
    }
    let header = 8 * (3 + shape.len());
    let body = &bytes[header..];
    let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4));
    if expected != Some(body.len()) {
        return Err(format_err(
            path,
            format!(
                "expected {rows}x{cols} f32 values, found {} bytes",
                body.len()
            ),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let t = Tensor::from_vec(rows, cols, data);
    if !t.is_finite() {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    Ok(t)
}

pub fn write_feature_file(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_features(t))?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    decode_features(&std::fs::read(path).map_err(|e| io_at(path, e))?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let t = Tensor::from_vec(2, 3, vec![0.1, -2.5, 3.0, 1e-3, 7.25, -0.0]);
        let back = decode_features(&encode_features(&t), Path::new("x")).unwrap();
        assert_eq!(back.shape(), (2, 3));
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn rejects_bad_files() {
        let t = Tensor::zeros(2, 2);
        let mut bytes = encode_features(&t);
        bytes[0] = b'X';
        assert!(matches!(
            decode_features(&bytes, Path::new("x")),
            Err(Error::Format(_))
        ));
        let bytes = encode_features(&t);
        assert!(decode_features(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut bytes = encode_features(&t);
        bytes[32] = 2;
        assert!(decode_features(&bytes, Path::new("x")).is_err());
        let mut nan = encode_features(&t);
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_features(&nan, Path::new("x")),
            Err(Error::NonFinite(_))
        ));
    }
}
