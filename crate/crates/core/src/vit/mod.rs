//! Vision transformer with CLS, register and patch tokens whose forward pass
//! records every block output and attention map.

mod config;
mod forward;
mod weights;

pub use config::{GroupKind, ModelConfig, PositionalMode, TokenGroup, TokenLayout};
pub use forward::{extract_features, ActivationTrace, FeatureGroup, ForwardOptions, VisionTransformer};
pub use weights::{BlockWeights, Linear, NormParams, ViTWeights};
