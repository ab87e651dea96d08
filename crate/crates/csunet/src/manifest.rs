//! `manifest.json`: the list of image/mask pairs that make up a dataset.

use std::collections::HashSet;
use std::io;
use std::path::{Path, PathBuf};

use csunet_core::train::Sample;
use serde::{Deserialize, Serialize};

use crate::fsutil::write_json;
use crate::volume::{read_header, read_volume, Dtype, VolumeError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_SUFFIX: &str = ".image.csuv";
pub const MASK_SUFFIX: &str = ".mask.csuv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Path relative to the manifest's directory.
    pub image: String,
    pub mask: String,
    pub fold: Option<usize>,
    /// Nodule contrast of generated phantoms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub samples: Vec<ManifestEntry>,
    /// Free-text description of how samples were selected.
    pub screening: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("sample `{id}`: missing file {}", path.display())]
    MissingFile { id: String, path: PathBuf },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("sample `{id}`: {} is not a valid volume: {source}", path.display())]
    BadVolume {
        id: String,
        path: PathBuf,
        #[source]
        source: VolumeError,
    },
    #[error("sample `{id}`: {detail}")]
    Inconsistent { id: String, detail: String },
    #[error("image {} has no matching mask", .0.display())]
    Unpaired(PathBuf),
    #[error("manifest is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Pairs every `<id>.image.csuv` in `dir` with its `<id>.mask.csuv`.
pub fn build_manifest(dir: &Path) -> Result<DatasetManifest, ManifestError> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = file_name(&path);
        if let Some(id) = name.strip_suffix(IMAGE_SUFFIX) {
            if !dir.join(format!("{id}{MASK_SUFFIX}")).is_file() {
                return Err(ManifestError::Unpaired(path));
            }
            ids.push(id.to_string());
        }
    }
    ids.sort();
    let manifest = DatasetManifest {
        samples: ids
            .into_iter()
            .map(|id| ManifestEntry {
                image: format!("{id}{IMAGE_SUFFIX}"),
                mask: format!("{id}{MASK_SUFFIX}"),
                id,
                fold: None,
                contrast: None,
                radius: None,
            })
            .collect(),
        screening: "every image/mask pair found in the directory".into(),
    };
    validate(&manifest, dir)?;
    Ok(manifest)
}

pub fn save_manifest(dir: &Path, manifest: &DatasetManifest) -> io::Result<()> {
    write_json(&dir.join(MANIFEST_FILE), manifest)
}

/// Accepts either a manifest file or the directory holding `manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a manifest and checks every referenced volume header.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let path = manifest_path(path);
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(&path)?)?;
    validate(&manifest, base_dir(&path))?;
    Ok(manifest)
}

fn base_dir(manifest: &Path) -> &Path {
    manifest.parent().unwrap_or(Path::new("."))
}

fn validate(m: &DatasetManifest, dir: &Path) -> Result<(), ManifestError> {
    let mut seen = HashSet::new();
    for e in &m.samples {
        if !seen.insert(e.id.as_str()) {
            return Err(ManifestError::DuplicateId(e.id.clone()));
        }
        let header = |rel: &str| {
            let path = dir.join(rel);
            if !path.is_file() {
                return Err(ManifestError::MissingFile { id: e.id.clone(), path });
            }
            read_header(&path).map_err(|source| ManifestError::BadVolume { id: e.id.clone(), path, source })
        };
        let (img, mask) = (header(&e.image)?, header(&e.mask)?);
        let inconsistent = |detail: String| Err(ManifestError::Inconsistent { id: e.id.clone(), detail });
        if img.dtype != Dtype::F32 || mask.dtype != Dtype::U8 {
            return inconsistent(format!("image must be f32 and mask u8, found {:?} and {:?}", img.dtype, mask.dtype));
        }
        if img.shape != mask.shape || mask.shape[0] != 1 {
            return inconsistent(format!("image {:?} and mask {:?} must share a single-channel shape", img.shape, mask.shape));
        }
    }
    Ok(())
}

/// Reads every sample of a manifest into memory.
pub fn load_samples(manifest_file: &Path) -> Result<(DatasetManifest, Vec<Sample>), ManifestError> {
    let path = manifest_path(manifest_file);
    let manifest = load_manifest(&path)?;
    if manifest.samples.is_empty() {
        return Err(ManifestError::Empty);
    }
    let dir = base_dir(&path);
    let read = |id: &str, rel: &str| {
        let p = dir.join(rel);
        read_volume(&p).map_err(|source| ManifestError::BadVolume { id: id.into(), path: p, source })
    };
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let image = read(&e.id, &e.image)?.into_f32().expect("dtype validated");
        let mask = read(&e.id, &e.mask)?.into_u8().expect("dtype validated");
        if mask.data().iter().any(|&v| v > 1) {
            return Err(ManifestError::Inconsistent {
                id: e.id.clone(),
                detail: "mask values must be 0 or 1".into(),
            });
        }
        samples.push(Sample { id: e.id.clone(), image, mask });
    }
    Ok((manifest, samples))
}
