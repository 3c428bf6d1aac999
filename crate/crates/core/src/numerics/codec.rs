//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes      | content                                  |
//! |------------|------------------------------------------|
//! | 4          | magic `BACT`                             |
//! | 1          | format version (currently 1)             |
//! | 1          | precision in bits: 32 or 64              |
//! | 1          | rank (1..=3)                             |
//! | 4 · rank   | extents as `u32`                         |
//! | rest       | row-major IEEE-754 payload               |

use std::fs;
use std::path::{Path, PathBuf};

use super::{Scalar, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"BACT";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a tensor file (bad magic)")]
    BadMagic,
    #[error("unsupported tensor format version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported precision byte {0} (expected 32 or 64)")]
    BadPrecision(u8),
    #[error("truncated tensor payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{trailing} trailing bytes after tensor payload")]
    Trailing { trailing: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl FormatError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn json(path: impl AsRef<Path>, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let bytes_per = T::BITS as usize / 8;
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + bytes_per * t.len());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(T::BITS);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Precision byte of an encoded tensor without decoding the payload.
pub fn peek_precision(bytes: &[u8]) -> Result<u8, FormatError> {
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    Ok(bytes[5])
}

fn decode_payload<S: Scalar, T: Scalar>(
    shape: &[usize],
    payload: &[u8],
) -> Result<Tensor<T>, FormatError> {
    let width = S::BITS as usize / 8;
    let data = payload
        .chunks_exact(width)
        .map(|c| T::from_f64(S::read_le(c).to_f64()))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

/// Decodes a tensor, converting the stored precision to `T` when they differ.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>, FormatError> {
    let precision = peek_precision(bytes)?;
    if bytes[4] != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    let width = match precision {
        32 => 4,
        64 => 8,
        other => return Err(FormatError::BadPrecision(other)),
    };
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(FormatError::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count = super::tensor::check_shape(&shape)?;
    let expected = header + count * width;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::Trailing {
            trailing: bytes.len() - expected,
        });
    }
    let payload = &bytes[header..];
    match precision {
        32 => decode_payload::<f32, T>(&shape, payload),
        _ => decode_payload::<f64, T>(&shape, payload),
    }
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<(), FormatError> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| FormatError::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>, FormatError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode_tensor(&bytes)
}
