use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Image, ImageSource, LabelMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    #[serde(default)]
    id: Option<String>,
    images: Vec<ImageRecord>,
}

/// Image list read from a JSON manifest:
///
/// ```json
/// {"id": "voc-val", "images": [{"path": "a.jpg", "label": 3, "mask": "a.png"}]}
/// ```
///
/// Relative paths resolve against the manifest's directory. Every referenced
/// file must exist when the manifest is loaded.
#[derive(Debug, Clone)]
pub struct ManifestDataset {
    id: String,
    records: Vec<ImageRecord>,
}

impl ManifestDataset {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: ManifestFile = serde_json::from_slice(&bytes)?;
        let root = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| -> Result<PathBuf> {
            let full = if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
            if !full.is_file() {
                return Err(Error::Dataset(format!(
                    "{} references missing file {}",
                    path.display(),
                    full.display()
                )));
            }
            Ok(full)
        };
        let mut records = Vec::with_capacity(file.images.len());
        for r in &file.images {
            records.push(ImageRecord {
                path: resolve(&r.path)?,
                label: r.label,
                mask: r.mask.as_deref().map(resolve).transpose()?,
            });
        }
        let id = file
            .id
            .unwrap_or_else(|| hex::encode(&Sha256::digest(&bytes)[..8]));
        Ok(Self { id, records })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    fn record(&self, index: usize) -> Result<&ImageRecord> {
        self.records.get(index).ok_or(Error::Range {
            what: "image",
            index,
            limit: self.records.len(),
        })
    }
}

impl ImageSource for ManifestDataset {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn len(&self) -> usize {
        self.records.len()
    }

    fn load(&self, index: usize) -> Result<Image> {
        Image::load(&self.record(index)?.path)
    }

    fn label(&self, index: usize) -> Option<usize> {
        self.records.get(index).and_then(|r| r.label)
    }

    fn mask(&self, index: usize) -> Result<Option<LabelMap>> {
        match &self.record(index)?.mask {
            Some(p) => LabelMap::load(p).map(Some),
            None => Ok(None),
        }
    }
}
