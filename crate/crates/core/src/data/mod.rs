//! Images, label maps, datasets and augmentation.

pub mod augment;
mod image;
mod manifest;
pub mod pairs;
pub mod synthetic;

pub use self::image::{Image, LabelMap, IMAGENET_MEAN, IMAGENET_STD};
pub use augment::{AugmentConfig, ViewTransform};
pub use manifest::{ImageRecord, ManifestDataset};
pub use pairs::{generate_synthetic_pairs, PairManifest, PairRecord};
pub use synthetic::SyntheticDataset;

use crate::error::Result;

/// Label value excluded from segmentation scoring.
pub const IGNORE_INDEX: u8 = 255;

/// Indexed collection of RGB images in `[0, 1]`.
pub trait ImageSource: Sync {
    /// Stable identifier used in calibration fingerprints.
    fn id(&self) -> String;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn load(&self, index: usize) -> Result<Image>;

    fn label(&self, _index: usize) -> Option<usize> {
        None
    }

    fn mask(&self, _index: usize) -> Result<Option<LabelMap>> {
        Ok(None)
    }
}

/// Resizes to the model's square input and applies ImageNet normalization.
pub fn prepare_for_model(image: &Image, size: usize) -> Image {
    image.resize(size, size).normalized()
}
