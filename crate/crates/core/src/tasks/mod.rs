//! Downstream evaluations over extracted features.

mod correspondence;
mod knn;
mod pck;
mod probe;
mod segmentation;

pub use correspondence::{
    patch_correspondence, patch_correspondence_multi, CorrespondencePair, CorrespondenceScore,
};
pub use knn::{cosine_nearest, knn_recall_at_1, row_norms, KnnOptions, KnnResult};
pub use pck::{pck_at_alpha, pck_oracle_ceiling, KeypointManifest, KeypointPair, PatchGrid, PckResult};
pub use probe::{
    stratified_split, train_linear_probe, train_softmax, LinearClassifier, Optimizer, ProbeConfig,
    ProbeResult, ProbeTask, Schedule,
};
pub use segmentation::{mean_iou, patch_labels, segmentation_probe, MiouResult, SegmentationSample};
