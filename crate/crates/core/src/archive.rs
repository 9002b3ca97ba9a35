//! `TARC1` tensor archive: the neutral container for weights, calibration
//! statistics and activation dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TARC1\n"                       6 bytes
//! manifest_len: u32                4 bytes
//! manifest: UTF-8 JSON             manifest_len bytes
//! data region                      rest of file
//! ```
//!
//! The manifest is a JSON object `{"metadata": {...}, "tensors": [...]}` where
//! each tensor entry is `{"name", "dtype": "f32", "shape": [..], "offset"}`.
//! `offset` is relative to the start of the data region and is a multiple of
//! 64; the tensor occupies `4 × product(shape)` bytes of little-endian `f32`.
//! The writer pads the manifest with trailing spaces so the data region also
//! starts on a 64-byte file boundary. Readers accept a bare JSON list of
//! tensor entries as the manifest (no metadata).

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 6] = b"TARC1\n";
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    #[serde(default)]
    metadata: Map<String, Value>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArchiveTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Archive(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Interprets the tensor as a matrix, folding leading singleton axes.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let dims: Vec<usize> = self.shape.iter().copied().skip_while(|&d| d == 1).collect();
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => {
                let cols = self.shape[1..].iter().product();
                (self.shape[0], cols)
            }
        };
        Matrix::from_vec(rows, cols, self.data.clone())
    }
}

impl From<&Matrix> for ArchiveTensor {
    fn from(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }
}

/// In-memory archive with insertion-ordered tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub metadata: Map<String, Value>,
    names: Vec<String>,
    tensors: Vec<ArchiveTensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArchiveTensor) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Archive(format!("duplicate tensor name {name:?}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) -> Result<()> {
        self.insert(name, ArchiveTensor::from(m))
    }

    pub fn insert_vector(&mut self, name: impl Into<String>, v: &[f32]) -> Result<()> {
        self.insert(name, ArchiveTensor::new(vec![v.len()], v.to_vec())?)
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&ArchiveTensor> {
        self.get(name)
            .ok_or_else(|| Error::Archive(format!("missing tensor {name:?}")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArchiveTensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.iter()
            .map(|(name, t)| {
                let entry = ManifestEntry {
                    name: name.to_string(),
                    dtype: "f32".into(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset = align_up(offset as usize + 4 * t.numel()) as u64;
                entry
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            metadata: self.metadata.clone(),
            tensors: self.manifest(),
        };
        let mut json = serde_json::to_vec(&manifest)?;
        let header = MAGIC.len() + 4;
        let padded = align_up(header + json.len());
        json.resize(padded - header, b' ');
        let manifest_len = u32::try_from(json.len())
            .map_err(|_| Error::Archive("manifest exceeds 4 GiB".into()))?;

        let mut out = Vec::with_capacity(padded + self.data_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&manifest_len.to_le_bytes());
        out.extend_from_slice(&json);
        let data_start = out.len();
        for (entry, t) in manifest.tensors.iter().zip(&self.tensors) {
            out.resize(data_start + entry.offset as usize, 0);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    fn data_len(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| align_up(4 * t.numel()))
            .sum()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Archive("bad magic; not a TARC1 archive".into()));
        }
        let len_bytes: [u8; 4] = bytes[6..10].try_into().expect("4 bytes");
        let manifest_len = u32::from_le_bytes(len_bytes) as usize;
        let data_start = 10 + manifest_len;
        if bytes.len() < data_start {
            return Err(Error::Archive("truncated manifest".into()));
        }
        let raw: Value = serde_json::from_slice(&bytes[10..data_start])?;
        let manifest: Manifest = match raw {
            Value::Array(_) => Manifest {
                metadata: Map::new(),
                tensors: serde_json::from_value(raw)?,
            },
            other => serde_json::from_value(other)?,
        };
        let data = &bytes[data_start..];

        let mut archive = TensorArchive {
            metadata: manifest.metadata,
            ..Default::default()
        };
        let mut seen = BTreeSet::new();
        let mut spans: Vec<(usize, usize, &str)> = Vec::new();
        for entry in &manifest.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Archive(format!(
                    "tensor {:?} has unsupported dtype {:?}",
                    entry.name, entry.dtype
                )));
            }
            if !seen.insert(entry.name.as_str()) {
                return Err(Error::Archive(format!("duplicate tensor name {:?}", entry.name)));
            }
            let start = entry.offset as usize;
            if start % ALIGN != 0 {
                return Err(Error::Archive(format!(
                    "tensor {:?} offset {start} is not {ALIGN}-byte aligned",
                    entry.name
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let end = start + 4 * numel;
            if end > data.len() {
                return Err(Error::Archive(format!(
                    "tensor {:?} spans {start}..{end} beyond data region of {} bytes",
                    entry.name,
                    data.len()
                )));
            }
            spans.push((start, end, entry.name.as_str()));
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            archive.names.push(entry.name.clone());
            archive.tensors.push(ArchiveTensor {
                shape: entry.shape.clone(),
                data: values,
            });
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Archive(format!(
                    "tensors {:?} and {:?} overlap",
                    w[0].2, w[1].2
                )));
            }
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::new();
        a.metadata.insert("kind".into(), Value::String("test".into()));
        a.insert("a", ArchiveTensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        a.insert("b", ArchiveTensor::new(vec![1], vec![-0.0]).unwrap()).unwrap();
        a
    }

    #[test]
    fn layout_is_aligned_and_headed() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..6], b"TARC1\n");
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        assert_eq!((10 + len) % ALIGN, 0);
        let m = sample().manifest();
        assert_eq!(m[0].offset, 0);
        assert_eq!(m[1].offset, 64);
        assert_eq!(bytes.len(), 10 + len + 64 + 4);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(TensorArchive::from_bytes(b"NOPE").is_err());
        let mut a = sample();
        assert!(a.insert("a", ArchiveTensor::new(vec![1], vec![0.0]).unwrap()).is_err());
        assert!(ArchiveTensor::new(vec![2, 2], vec![0.0; 3]).is_err());

        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(TensorArchive::from_bytes(&bytes), Err(Error::Archive(_))));
    }

    #[test]
    fn accepts_bare_list_manifest() {
        let manifest = br#"[{"name":"x","dtype":"f32","shape":[2],"offset":0}]"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        bytes.extend_from_slice(manifest);
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let a = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(a.require("x").unwrap().data, vec![1.5, -2.0]);
    }

    #[test]
    fn rejects_overlap_and_misalignment() {
        let manifest = br#"[{"name":"x","dtype":"f32","shape":[32],"offset":0},{"name":"y","dtype":"f32","shape":[1],"offset":64}]"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        bytes.extend_from_slice(manifest);
        bytes.extend(std::iter::repeat_n(0u8, 256));
        assert!(TensorArchive::from_bytes(&bytes).unwrap_err().to_string().contains("overlap"));

        let manifest = br#"[{"name":"x","dtype":"f32","shape":[1],"offset":4}]"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        bytes.extend_from_slice(manifest);
        bytes.extend(std::iter::repeat_n(0u8, 64));
        assert!(TensorArchive::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            tensors in proptest::collection::vec(
                proptest::collection::vec(any::<u32>().prop_map(f32::from_bits), 0..40),
                0..6,
            )
        ) {
            let mut a = TensorArchive::new();
            for (i, t) in tensors.iter().enumerate() {
                a.insert(format!("t{i}"), ArchiveTensor::new(vec![t.len()], t.clone()).unwrap()).unwrap();
            }
            let bytes = a.to_bytes().unwrap();
            let b = TensorArchive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(a.manifest(), b.manifest());
            for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
                let xb: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
            prop_assert_eq!(b.to_bytes().unwrap(), bytes);
        }
    }
}
