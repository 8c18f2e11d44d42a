//! QTEN: a minimal binary container for one dense tensor.
//!
//! Layout: `"QTEN"`, version byte (1), dtype byte (0 = real64, 1 =
//! complex128), ndim byte, a zero reserved byte, `ndim` little-endian `u64`
//! dims, then the row-major little-endian payload (complex as re, im pairs).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, C64};

pub const MAGIC: [u8; 4] = *b"QTEN";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Real64,
    Complex128,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::Real64 => 0,
            Dtype::Complex128 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::Real64),
            1 => Ok(Dtype::Complex128),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn value_size(self) -> usize {
        match self {
            Dtype::Real64 => 8,
            Dtype::Complex128 => 16,
        }
    }
}

/// Serializes `t`. `Real64` requires every imaginary part to be `+0.0` so the
/// round trip stays bit-exact.
pub fn encode(t: &DenseTensor, dtype: Dtype) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Malformed(format!("rank {} does not fit in one byte", t.rank())));
    }
    if dtype == Dtype::Real64 && t.data().iter().any(|v| v.im.to_bits() != 0) {
        return Err(Error::InvalidConfig(
            "tensor has imaginary parts and cannot be stored as real64".into(),
        ));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.rank() + dtype.value_size() * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, dtype.code(), t.rank() as u8, 0]);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.re.to_le_bytes());
        if dtype == Dtype::Complex128 {
            out.extend_from_slice(&v.im.to_le_bytes());
        }
    }
    Ok(out)
}

fn truncated(expected: usize, found: usize) -> Error {
    Error::Truncated {
        expected: expected as u64,
        found: found as u64,
    }
}

/// Parses a QTEN byte buffer, validating header and exact payload size.
pub fn decode(bytes: &[u8]) -> Result<(DenseTensor, Dtype)> {
    if bytes.len() < 4 {
        return Err(truncated(HEADER_LEN, bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN, bytes.len()));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let dtype = Dtype::from_code(bytes[5])?;
    let ndim = bytes[6] as usize;
    if bytes[7] != 0 {
        return Err(Error::Malformed(format!("reserved byte is {}, expected 0", bytes[7])));
    }
    let dims_end = HEADER_LEN + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(truncated(dims_end, bytes.len()));
    }
    let dims: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("eight bytes")))
        .map(|d| usize::try_from(d).map_err(|_| Error::Malformed(format!("dimension {d} overflows"))))
        .collect::<Result<_>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Malformed(format!("element count of {dims:?} overflows")))?;
    let expected = count
        .checked_mul(dtype.value_size())
        .and_then(|p| p.checked_add(dims_end))
        .ok_or_else(|| Error::Malformed(format!("payload size of {dims:?} overflows")))?;
    if bytes.len() < expected {
        return Err(truncated(expected, bytes.len()));
    }
    if bytes.len() > expected {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("eight bytes"));
    let payload = &bytes[dims_end..];
    let data: Vec<C64> = match dtype {
        Dtype::Real64 => payload.chunks_exact(8).map(|c| C64::new(f(c), 0.0)).collect(),
        Dtype::Complex128 => payload
            .chunks_exact(16)
            .map(|c| C64::new(f(&c[..8]), f(&c[8..])))
            .collect(),
    };
    Ok((DenseTensor::new(dims, data)?, dtype))
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// renamed into place once complete.
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

/// Writes `t` as complex128.
pub fn write_qten(path: &Path, t: &DenseTensor) -> Result<()> {
    write_qten_as(path, t, Dtype::Complex128)
}

pub fn write_qten_as(path: &Path, t: &DenseTensor, dtype: Dtype) -> Result<()> {
    write_atomic(path, &encode(t, dtype)?)
}

pub fn read_qten(path: &Path) -> Result<DenseTensor> {
    Ok(read_qten_typed(path)?.0)
}

pub fn read_qten_typed(path: &Path) -> Result<(DenseTensor, Dtype)> {
    decode(&fs::read(path)?)
}
