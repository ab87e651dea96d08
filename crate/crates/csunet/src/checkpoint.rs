//! The `CSUC` checkpoint format.
//!
//! Little-endian layout: magic `CSUC`, `u32` version, `u32` length and bytes
//! of the JSON network configuration, `u32` record count, then for every
//! registry entry in order: `u32` name length and UTF-8 name, `u32` rank,
//! `u32` extents, and the `f32` payload.

use std::io;
use std::path::Path;

use csunet_core::{CsuNet3d, NetworkConfig, Real};

use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 4] = b"CSUC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, not a CSUC checkpoint")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {0}")]
    UnknownVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("trailing bytes after the last record")]
    TrailingData,
    #[error("embedded network configuration is invalid: {0}")]
    BadConfig(String),
    #[error("checkpoint was saved for a different network configuration:\n  expected {expected}\n  found    {found}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint holds {found} parameter records, the network has {expected}")]
    CountMismatch { expected: usize, found: usize },
    #[error("record {index}: expected parameter `{expected}`, found `{found}`")]
    NameMismatch { index: usize, expected: String, found: String },
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Network(#[from] csunet_core::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field exceeds u32").to_le_bytes());
}

pub fn encode<T: Real>(net: &CsuNet3d<T>) -> Vec<u8> {
    let config = serde_json::to_vec(&net.config).expect("network config serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, config.len());
    out.extend_from_slice(&config);
    put_u32(&mut out, net.store.len());
    for (_, p) in net.store.iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len());
        for &e in p.value.shape() {
            put_u32(&mut out, e);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")) as usize)
    }
}

/// Decodes a checkpoint; when `expected` is given the embedded configuration
/// must equal it.
pub fn decode(bytes: &[u8], expected: Option<&NetworkConfig>) -> Result<CsuNet3d<f32>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| CheckpointError::BadMagic(bytes.to_vec()))?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic.to_vec()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(CheckpointError::UnknownVersion(version as u32));
    }
    let len = r.u32("config length")?;
    let config: NetworkConfig =
        serde_json::from_slice(r.take(len, "config")?).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    if let Some(want) = expected {
        if *want != config {
            let show = |c: &NetworkConfig| serde_json::to_string(c).expect("network config serialises");
            return Err(CheckpointError::ConfigMismatch {
                expected: show(want),
                found: show(&config),
            });
        }
    }
    let mut net = CsuNet3d::<f32>::build(&config).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let count = r.u32("record count")?;
    if count != net.store.len() {
        return Err(CheckpointError::CountMismatch {
            expected: net.store.len(),
            found: count,
        });
    }
    for (index, p) in net.store.iter_mut().enumerate() {
        let n = r.u32("name length")?;
        let name = String::from_utf8_lossy(r.take(n, "name")?).into_owned();
        if name != p.name {
            return Err(CheckpointError::NameMismatch {
                index,
                expected: p.name.clone(),
                found: name,
            });
        }
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("extent")).collect::<Result<Vec<_>, _>>()?;
        if shape != p.value.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: p.value.shape().to_vec(),
                found: shape,
            });
        }
        let payload = r.take(4 * p.value.len(), "payload")?;
        for (dst, c) in p.value.data_mut().iter_mut().zip(payload.chunks_exact(4)) {
            *dst = f32::from_le_bytes(c.try_into().expect("four bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingData);
    }
    Ok(net)
}

pub fn save_checkpoint<T: Real>(net: &CsuNet3d<T>, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &encode(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&NetworkConfig>) -> Result<CsuNet3d<f32>, CheckpointError> {
    decode(&std::fs::read(path)?, expected)
}
