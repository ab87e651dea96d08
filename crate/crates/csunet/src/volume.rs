//! The `CSUV` single-sample volume format.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `CSUV` |
//! | 4 | version, `u32` = 1 |
//! | 1 | dtype: 0 = `f32`, 1 = `u8` |
//! | 16 | extents `C, D, H, W` as `u32` |
//! | … | row-major payload |

use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use csunet_core::Tensor;

use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 4] = b"CSUV";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 1 + 4 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("bad magic {0:?}, not a CSUV volume")]
    BadMagic([u8; 4]),
    #[error("unsupported CSUV version {0}")]
    UnknownVersion(u32),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated volume: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("trailing data: expected {expected} bytes, found {found}")]
    TrailingData { expected: u64, found: u64 },
    #[error("volume must be (C,D,H,W) with extents below 2^32, got {0:?}")]
    BadShape(Vec<usize>),
    #[error("expected a {expected:?} volume, found {found:?}")]
    WrongDtype { expected: Dtype, found: Dtype },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    F32(Tensor<f32>),
    U8(Tensor<u8>),
}

impl Volume {
    pub fn dtype(&self) -> Dtype {
        match self {
            Volume::F32(_) => Dtype::F32,
            Volume::U8(_) => Dtype::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Volume::F32(t) => t.shape(),
            Volume::U8(t) => t.shape(),
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>, VolumeError> {
        match self {
            Volume::F32(t) => Ok(t),
            Volume::U8(_) => Err(VolumeError::WrongDtype { expected: Dtype::F32, found: Dtype::U8 }),
        }
    }

    pub fn into_u8(self) -> Result<Tensor<u8>, VolumeError> {
        match self {
            Volume::U8(t) => Ok(t),
            Volume::F32(_) => Err(VolumeError::WrongDtype { expected: Dtype::U8, found: Dtype::F32 }),
        }
    }
}

impl From<Tensor<f32>> for Volume {
    fn from(t: Tensor<f32>) -> Self {
        Volume::F32(t)
    }
}

impl From<Tensor<u8>> for Volume {
    fn from(t: Tensor<u8>) -> Self {
        Volume::U8(t)
    }
}

/// Parsed fixed-size header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: [usize; 4],
}

impl Header {
    pub fn payload_len(&self) -> u64 {
        self.shape.iter().map(|&e| e as u64).product::<u64>() * self.dtype.size() as u64
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN as u64 + self.payload_len()
    }
}

pub fn encode(volume: &Volume) -> Result<Vec<u8>, VolumeError> {
    let shape = volume.shape();
    if shape.len() != 4 || shape.iter().any(|&e| u32::try_from(e).is_err()) {
        return Err(VolumeError::BadShape(shape.to_vec()));
    }
    let len: usize = shape.iter().product();
    let mut out = Vec::with_capacity(HEADER_LEN + len * volume.dtype().size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(volume.dtype() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match volume {
        Volume::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Volume::U8(t) => out.extend_from_slice(t.data()),
    }
    Ok(out)
}

pub fn parse_header(bytes: &[u8]) -> Result<Header, VolumeError> {
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(VolumeError::BadMagic(bytes[..4].try_into().expect("four bytes")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(VolumeError::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("four bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(VolumeError::UnknownVersion(version));
    }
    let dtype = match bytes[8] {
        0 => Dtype::F32,
        1 => Dtype::U8,
        other => return Err(VolumeError::UnknownDtype(other)),
    };
    let shape = [0, 1, 2, 3].map(|i| u32_at(9 + 4 * i) as usize);
    Ok(Header { dtype, shape })
}

pub fn decode(bytes: &[u8]) -> Result<Volume, VolumeError> {
    let header = parse_header(bytes)?;
    let (expected, found) = (header.file_len(), bytes.len() as u64);
    if found < expected {
        return Err(VolumeError::Truncated { expected, found });
    }
    if found > expected {
        return Err(VolumeError::TrailingData { expected, found });
    }
    let payload = &bytes[HEADER_LEN..];
    let shape = header.shape.to_vec();
    let volume = match header.dtype {
        Dtype::F32 => Volume::F32(
            Tensor::new(
                shape,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                    .collect(),
            )
            .expect("length checked against header"),
        ),
        Dtype::U8 => Volume::U8(Tensor::new(shape, payload.to_vec()).expect("length checked against header")),
    };
    Ok(volume)
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<(), VolumeError> {
    let bytes = encode(volume)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume, VolumeError> {
    decode(&std::fs::read(path)?)
}

/// Reads and validates only the header, checking the file length against it.
pub fn read_header(path: &Path) -> Result<Header, VolumeError> {
    let mut file = File::open(path)?;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    file.by_ref().take(HEADER_LEN as u64).read_to_end(&mut buf)?;
    let header = parse_header(&buf)?;
    let found = file.metadata()?.len();
    let expected = header.file_len();
    if found < expected {
        return Err(VolumeError::Truncated { expected, found });
    }
    if found > expected {
        return Err(VolumeError::TrailingData { expected, found });
    }
    Ok(header)
}
