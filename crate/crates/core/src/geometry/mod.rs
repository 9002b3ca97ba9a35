//! Representation-geometry and attention measurements.

mod attention;
mod pca;
mod spectrum;

pub use attention::{
    attention_flow, attention_js, attention_js_per_layer, js_divergence, AttentionFlowSummary,
    JsRows,
};
pub use pca::{pca_rgb, Pca, PcaRgb};
pub use spectrum::{
    eigenspectrum, effective_rank, effective_rank_with, gram_spectrum, spectrum_entropy,
    spectral_entropy, spectrum_entropy_with, Eigenspectrum, GramMode, SpectrumNorm,
};

use crate::error::{Error, Result};
use crate::tensor::{cosine, Matrix};
use crate::vit::{extract_features, ActivationTrace, FeatureGroup};

/// Mean cosine between corresponding rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSummary {
    pub mean: f64,
    /// Rows where either side had zero norm; each contributed 0.
    pub zero_norm: usize,
}

pub fn row_cosine(a: &Matrix, b: &Matrix) -> Result<CosineSummary> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "cosine between {:?} and {:?} features",
            a.shape(),
            b.shape()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::Contract("no rows to compare".into()));
    }
    let mut sum = 0.0;
    let mut zero_norm = 0;
    for (x, y) in a.row_iter().zip(b.row_iter()) {
        match cosine(x, y) {
            Some(c) => sum += c,
            None => zero_norm += 1,
        }
    }
    if zero_norm > 0 {
        log::debug!("{zero_norm} zero-norm rows counted as cosine 0");
    }
    Ok(CosineSummary {
        mean: sum / a.rows() as f64,
        zero_norm,
    })
}

/// Mean per-patch cosine between the final patch features of two traces of
/// the same image.
pub fn patch_cosine_to_full(full: &ActivationTrace, ablated: &ActivationTrace) -> Result<f64> {
    if full.layout != ablated.layout {
        return Err(Error::Contract("traces come from different layouts".into()));
    }
    let a = extract_features(full, FeatureGroup::Patches)?;
    let b = extract_features(ablated, FeatureGroup::Patches)?;
    row_cosine(&a, &b).map(|s| s.mean)
}
