use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TokenSlot;
use crate::archive::TensorArchive;
use crate::data::{prepare_for_model, ImageSource};
use crate::error::{Error, Result};
use crate::tensor::stream;
use crate::vit::{ForwardOptions, VisionTransformer};

/// Running moments with an associative merge (Chan et al.).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f32]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let v = v as f64;
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Mean and population (`1/N`) variance.
    pub fn finish(&self) -> SlotMoments {
        let n = self.count.max(1) as f64;
        SlotMoments {
            mean: self.mean.iter().map(|&m| m as f32).collect(),
            var: self.m2.iter().map(|&s| (s / n).max(0.0) as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotMoments {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFingerprint {
    pub dataset_id: String,
    pub seed: u64,
}

/// Per-(block, slot) mean and variance of unintervened block outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub entries: BTreeMap<(usize, TokenSlot), SlotMoments>,
    pub sample_count: usize,
    pub fingerprint: SourceFingerprint,
    /// True when register slots share moments pooled across slots.
    pub pooled: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationSidecar {
    pub id: String,
    pub sample_count: usize,
    pub seed: u64,
    pub dataset_id: String,
    pub pooled: bool,
    pub layers: Vec<usize>,
    pub slots: Vec<TokenSlot>,
}

impl CalibrationStats {
    pub fn get(&self, layer: usize, slot: TokenSlot) -> Option<&SlotMoments> {
        self.entries.get(&(layer, slot))
    }

    pub fn require(&self, layer: usize, slot: TokenSlot) -> Result<&SlotMoments> {
        self.get(layer, slot).ok_or_else(|| {
            Error::Config(format!(
                "calibration has no statistics for block {layer}, slot {slot:?}"
            ))
        })
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.entries.keys().map(|(l, _)| *l).collect();
        l.dedup();
        l
    }

    pub fn slots(&self) -> Vec<TokenSlot> {
        let mut s: Vec<TokenSlot> = self.entries.keys().map(|(_, s)| *s).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Stable identifier derived from the contents' provenance.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.fingerprint.dataset_id.as_bytes());
        h.update(self.fingerprint.seed.to_le_bytes());
        h.update((self.sample_count as u64).to_le_bytes());
        h.update([self.pooled as u8]);
        for (layer, slot) in self.entries.keys() {
            h.update((*layer as u64).to_le_bytes());
            h.update(slot.archive_component().as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Replaces every register slot's moments at a block with the moments
    /// of all register rows pooled together.
    pub fn pooled_over_registers(&self) -> CalibrationStats {
        let mut out = self.clone();
        out.pooled = true;
        for layer in self.layers() {
            let regs: Vec<&SlotMoments> = self
                .entries
                .iter()
                .filter(|((l, s), _)| *l == layer && matches!(s, TokenSlot::Register(_)))
                .map(|(_, m)| m)
                .collect();
            if regs.is_empty() {
                continue;
            }
            let k = regs.len() as f64;
            let dim = regs[0].mean.len();
            let mut mean = vec![0.0f64; dim];
            let mut second = vec![0.0f64; dim];
            for m in &regs {
                for i in 0..dim {
                    let mu = m.mean[i] as f64;
                    mean[i] += mu / k;
                    second[i] += (m.var[i] as f64 + mu * mu) / k;
                }
            }
            let pooled = SlotMoments {
                mean: mean.iter().map(|&m| m as f32).collect(),
                var: mean
                    .iter()
                    .zip(&second)
                    .map(|(&m, &s)| (s - m * m).max(0.0) as f32)
                    .collect(),
            };
            for ((l, s), m) in out.entries.iter_mut() {
                if *l == layer && matches!(s, TokenSlot::Register(_)) {
                    *m = pooled.clone();
                }
            }
        }
        out
    }

    pub fn sidecar(&self) -> CalibrationSidecar {
        CalibrationSidecar {
            id: self.id(),
            sample_count: self.sample_count,
            seed: self.fingerprint.seed,
            dataset_id: self.fingerprint.dataset_id.clone(),
            pooled: self.pooled,
            layers: self.layers(),
            slots: self.slots(),
        }
    }

    /// Entries named `calib/layer{l}/{slot}/mean` and `.../var`; the sidecar
    /// is also stored in the archive metadata.
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.metadata
            .insert("calibration".into(), serde_json::to_value(self.sidecar())?);
        for ((layer, slot), m) in &self.entries {
            let base = format!("calib/layer{layer}/{}", slot.archive_component());
            a.insert_vector(format!("{base}/mean"), &m.mean)?;
            a.insert_vector(format!("{base}/var"), &m.var)?;
        }
        Ok(a)
    }

    pub fn from_archive(archive: &TensorArchive, sidecar: &CalibrationSidecar) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for name in archive.names() {
            let Some(rest) = name.strip_prefix("calib/layer") else {
                continue;
            };
            let parts: Vec<&str> = rest.split('/').collect();
            if parts.len() != 3 || parts[2] != "mean" {
                continue;
            }
            let layer: usize = parts[0]
                .parse()
                .map_err(|_| Error::Archive(format!("bad calibration name {name:?}")))?;
            let slot = TokenSlot::parse_archive_component(parts[1])
                .ok_or_else(|| Error::Archive(format!("bad calibration slot in {name:?}")))?;
            let mean = archive.require(name)?.data.clone();
            let var = archive
                .require(&format!("calib/layer{layer}/{}/var", parts[1]))?
                .data
                .clone();
            if var.len() != mean.len() || var.iter().any(|&v| v < 0.0) {
                return Err(Error::Archive(format!("invalid variance for {name:?}")));
            }
            entries.insert((layer, slot), SlotMoments { mean, var });
        }
        if sidecar.sample_count == 0 {
            return Err(Error::Archive("calibration sample count is zero".into()));
        }
        let stats = CalibrationStats {
            entries,
            sample_count: sidecar.sample_count,
            fingerprint: SourceFingerprint {
                dataset_id: sidecar.dataset_id.clone(),
                seed: sidecar.seed,
            },
            pooled: sidecar.pooled,
        };
        if stats.id() != sidecar.id {
            return Err(Error::Archive(format!(
                "calibration id mismatch: sidecar {} vs contents {}",
                sidecar.id,
                stats.id()
            )));
        }
        Ok(stats)
    }

    /// Writes `<stem>.tarc` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.to_archive()?.write(&dir.join(format!("{stem}.tarc")))?;
        let json = serde_json::to_vec_pretty(&self.sidecar())?;
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.json"));
        let sidecar: CalibrationSidecar =
            serde_json::from_slice(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let archive = TensorArchive::read(&dir.join(format!("{stem}.tarc")))?;
        Self::from_archive(&archive, &sidecar)
    }
}

/// Picks `n` dataset indices: all of them in order when `n` equals the
/// dataset size, otherwise a seeded sample without replacement (sorted).
pub fn calibration_indices(dataset_len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if dataset_len == 0 {
        return Err(Error::Dataset("calibration dataset is empty".into()));
    }
    if n == 0 {
        return Err(Error::Config("calibration sample count must be positive".into()));
    }
    if n > dataset_len {
        return Err(Error::Config(format!(
            "calibration needs {n} images but the dataset has {dataset_len}"
        )));
    }
    if n == dataset_len {
        return Ok((0..n).collect());
    }
    let mut rng = stream(seed, "calibration/select", 0);
    let mut idx = sample(&mut rng, dataset_len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Exact per-(block, slot) sample mean and population variance of
/// unintervened block outputs over `n` images.
///
/// Images are processed in batches of `batch_size`; accumulation runs in
/// dataset order so results do not depend on thread scheduling.
#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    dataset: &dyn ImageSource,
    model: &VisionTransformer,
    layers: &[usize],
    slots: &[TokenSlot],
    n: usize,
    seed: u64,
    batch_size: usize,
) -> Result<CalibrationStats> {
    let layout = model.layout();
    let depth = model.config().depth;
    let indices = calibration_indices(dataset.len(), n, seed)?;
    let mut tokens = Vec::with_capacity(slots.len());
    for &s in slots {
        tokens.push(s.token_index(&layout).map_err(|e| match (s, e) {
            (TokenSlot::Register(_), _) if layout.register_count == 0 => {
                Error::Config("register calibration requested for a model without registers".into())
            }
            (_, e) => e,
        })?);
    }
    for &l in layers {
        if l >= depth {
            return Err(Error::Range {
                what: "block",
                index: l,
                limit: depth,
            });
        }
    }
    let d = model.config().hidden_dim;
    let mut acc: BTreeMap<(usize, TokenSlot), MomentAccumulator> = BTreeMap::new();
    for &l in layers {
        for &s in slots {
            acc.insert((l, s), MomentAccumulator::new(d));
        }
    }
    let size = model.config().image_size;
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|&i| dataset.load(i).map(|img| prepare_for_model(&img, size)))
            .collect::<Result<Vec<_>>>()?;
        let traces = model.forward_batch(
            &images,
            None,
            ForwardOptions {
                record_attention: false,
            },
        )?;
        for trace in &traces {
            for &l in layers {
                let state = &trace.token_states[l + 1];
                for (&s, &t) in slots.iter().zip(&tokens) {
                    acc.get_mut(&(l, s)).expect("initialised").push(state.row(t));
                }
            }
        }
    }
    Ok(CalibrationStats {
        entries: acc.into_iter().map(|(k, a)| (k, a.finish())).collect(),
        sample_count: n,
        fingerprint: SourceFingerprint {
            dataset_id: dataset.id(),
            seed,
        },
        pooled: false,
    })
}
