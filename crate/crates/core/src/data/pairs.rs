use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AugmentConfig, ImageSource, ViewTransform};
use crate::error::{Error, Result};
use crate::tensor::stream;

/// Two augmented views of one source image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub image_index: usize,
    pub views: [ViewTransform; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub dataset_id: String,
    pub seed: u64,
    pub augmentation: AugmentConfig,
    pub out_size: usize,
    pub pairs: Vec<PairRecord>,
    /// Pairs dropped after exhausting retries without crop overlap.
    pub skipped: usize,
}

impl PairManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const PAIR_RETRIES: usize = 16;

/// Draws `n_pairs` view pairs, deterministic per seed. A pair whose crops do
/// not overlap is redrawn up to [`PAIR_RETRIES`] times, then skipped.
pub fn generate_synthetic_pairs(
    dataset: &dyn ImageSource,
    augmentation: &AugmentConfig,
    out_size: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<PairManifest> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot draw pairs from an empty dataset".into()));
    }
    augmentation.validate()?;
    let mut dims = vec![None; dataset.len()];
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut skipped = 0;
    for i in 0..n_pairs {
        let image_index = stream(seed, "pairs/image", i as u64).random_range(0..dataset.len());
        let (w, h) = match dims[image_index] {
            Some(d) => d,
            None => {
                let img = dataset.load(image_index)?;
                dims[image_index] = Some((img.width, img.height));
                (img.width, img.height)
            }
        };
        let mut rng = stream(seed, "pairs/views", i as u64);
        let found = (0..PAIR_RETRIES).find_map(|_| {
            let a = augmentation.sample_view(w, h, out_size, &mut rng);
            let b = augmentation.sample_view(w, h, out_size, &mut rng);
            (a.overlap_area(&b) > 0.0).then_some([a, b])
        });
        match found {
            Some(views) => pairs.push(PairRecord { image_index, views }),
            None => {
                log::warn!("pair {i}: no overlapping crops after {PAIR_RETRIES} draws, skipped");
                skipped += 1;
            }
        }
    }
    Ok(PairManifest {
        dataset_id: dataset.id(),
        seed,
        augmentation: *augmentation,
        out_size,
        pairs,
        skipped,
    })
}
