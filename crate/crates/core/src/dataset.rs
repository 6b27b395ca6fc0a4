//! On-disk sample collections: a JSON manifest plus one raw tensor file per
//! sample and modality, with paths relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MmdaError, Result};
use crate::tensor_io::RawTensor;
use crate::types::{BatchSample, DomainLabel, Liveness, ModalityKind, ModalitySet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub domain: String,
    pub label: Liveness,
    pub files: BTreeMap<ModalityKind, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub samples: Vec<ManifestEntry>,
}

fn tensor_file_name(sample_id: &str, kind: ModalityKind) -> Result<String> {
    if sample_id.is_empty() || !sample_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
        return Err(MmdaError::validation(format!(
            "sample id '{sample_id}' cannot be used as a file name"
        )));
    }
    Ok(format!("{sample_id}.{kind}.mmt"))
}

/// Writes the tensors and `manifest.json` into `dir`, creating it if needed.
pub fn write_manifest(dir: &Path, samples: &[BatchSample], config_hash: Option<&str>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| MmdaError::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        let mut files = BTreeMap::new();
        for (kind, img) in &s.images {
            let name = tensor_file_name(&s.sample_id, *kind)?;
            RawTensor::from_image(img).write_file(&dir.join(&name))?;
            files.insert(*kind, name);
        }
        entries.push(ManifestEntry {
            sample_id: s.sample_id.clone(),
            domain: s.domain.as_str().to_owned(),
            label: s.label,
            files,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config_hash: config_hash.map(str::to_owned),
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| MmdaError::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest_file(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| MmdaError::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| MmdaError::format(format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(MmdaError::format(format!(
            "{}: unsupported manifest version {}",
            path.display(),
            m.version
        )));
    }
    Ok(m)
}

/// Loads every sample listed in `dir/manifest.json`.
pub fn read_manifest(dir: &Path) -> Result<Vec<BatchSample>> {
    let m = read_manifest_file(dir)?;
    m.samples
        .iter()
        .map(|e| {
            let mut images = BTreeMap::new();
            for (kind, rel) in &e.files {
                if Path::new(rel).is_absolute() {
                    return Err(MmdaError::format(format!("absolute tensor path '{rel}' in manifest")));
                }
                images.insert(*kind, RawTensor::read_file(&dir.join(rel))?.to_image()?);
            }
            let s = BatchSample {
                present: ModalitySet::from_kinds(images.keys().copied()),
                images,
                domain: DomainLabel::new(&e.domain),
                label: e.label,
                sample_id: e.sample_id.clone(),
            };
            s.validate()?;
            Ok(s)
        })
        .collect()
}
