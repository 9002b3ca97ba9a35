use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sym_eigenvalues_f64, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramMode {
    /// `F Fᵀ` of the raw features.
    #[default]
    Uncentered,
    /// Features centred on their column means first.
    Centered,
}

/// Ascending eigenvalues of the patch Gram matrix.
///
/// `F Fᵀ` and `Fᵀ F` share their nonzero spectrum, so the smaller of the two
/// is decomposed; the result always has `min(P, d)` entries.
pub fn gram_spectrum(features: &Matrix, mode: GramMode) -> Result<Vec<f64>> {
    if features.rows() == 0 || features.cols() == 0 {
        return Err(Error::Contract("empty feature matrix".into()));
    }
    if !features.is_finite() {
        return Err(Error::Contract("non-finite features".into()));
    }
    let centered;
    let f = match mode {
        GramMode::Uncentered => features,
        GramMode::Centered => {
            let mu = features.column_means();
            let mut m = features.clone();
            for r in 0..m.rows() {
                for (v, &c) in m.row_mut(r).iter_mut().zip(&mu) {
                    *v = (*v as f64 - c) as f32;
                }
            }
            centered = m;
            &centered
        }
    };
    if f.rows() <= f.cols() {
        sym_eigenvalues_f64(f.rows(), &f.gram_f64())
    } else {
        sym_eigenvalues_f64(f.cols(), &f.cross_f64())
    }
}

fn entropy_of(eigenvalues: &[f64]) -> Result<f64> {
    let max = eigenvalues.iter().copied().fold(0.0f64, f64::max);
    // Round-off negatives from a PSD source are treated as zero.
    let total: f64 = eigenvalues.iter().map(|&l| l.max(0.0)).sum();
    if !(max > 0.0) || !(total > 0.0) {
        return Err(Error::Degenerate("Gram spectrum is identically zero".into()));
    }
    Ok(eigenvalues
        .iter()
        .map(|&l| l.max(0.0) / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum::<f64>()
        .max(0.0))
}

/// Shannon entropy (nats) of a nonnegative spectrum normalized to sum 1.
pub fn spectral_entropy(eigenvalues: &[f64]) -> Result<f64> {
    entropy_of(eigenvalues)
}

pub fn spectrum_entropy_with(features: &Matrix, mode: GramMode) -> Result<f64> {
    entropy_of(&gram_spectrum(features, mode)?)
}

pub fn spectrum_entropy(features: &Matrix) -> Result<f64> {
    spectrum_entropy_with(features, GramMode::Uncentered)
}

pub fn effective_rank_with(features: &Matrix, mode: GramMode) -> Result<f64> {
    spectrum_entropy_with(features, mode).map(f64::exp)
}

/// `exp` of the spectral entropy of the uncentered Gram matrix.
pub fn effective_rank(features: &Matrix) -> Result<f64> {
    effective_rank_with(features, GramMode::Uncentered)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumNorm {
    #[default]
    Max,
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenspectrum {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub normalization: SpectrumNorm,
    pub normalized: Vec<f64>,
}

pub fn eigenspectrum(features: &Matrix, mode: GramMode, norm: SpectrumNorm) -> Result<Eigenspectrum> {
    let eigenvalues = gram_spectrum(features, mode)?;
    let denom = match norm {
        SpectrumNorm::Max => eigenvalues.last().copied().unwrap_or(0.0),
        SpectrumNorm::Trace => eigenvalues.iter().map(|&l| l.max(0.0)).sum(),
    };
    if !(denom > 0.0) {
        return Err(Error::Degenerate("Gram spectrum is identically zero".into()));
    }
    Ok(Eigenspectrum {
        normalized: eigenvalues.iter().map(|&l| l / denom).collect(),
        eigenvalues,
        normalization: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_spectrum_of_four() {
        let f = Matrix::identity(4).scale(3.0);
        assert!((spectrum_entropy(&f).unwrap() - 4f64.ln()).abs() < 1e-9);
        assert!((effective_rank(&f).unwrap() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn rank_one_is_one() {
        let f = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0], vec![-1.0, -2.0, -3.0]]).unwrap();
        assert!((effective_rank(&f).unwrap() - 1.0).abs() < 1e-6);
        assert!(spectrum_entropy(&f).unwrap().abs() < 1e-6);
    }

    #[test]
    fn all_zero_is_degenerate() {
        let f = Matrix::zeros(5, 3);
        assert!(matches!(effective_rank(&f), Err(Error::Degenerate(_))));
        assert!(matches!(
            eigenspectrum(&f, GramMode::Uncentered, SpectrumNorm::Max),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn tall_and_wide_agree() {
        let f = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let a = effective_rank(&f).unwrap();
        let b = effective_rank(&f.transpose()).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn normalized_spectrum_tops_at_one() {
        let f = Matrix::from_diag(&[1.0, 2.0, 4.0]);
        let s = eigenspectrum(&f, GramMode::Uncentered, SpectrumNorm::Max).unwrap();
        assert_eq!(s.normalized.len(), 3);
        assert!((s.normalized[2] - 1.0).abs() < 1e-12);
        assert!((s.normalized[0] - 1.0 / 16.0).abs() < 1e-9);
        let t = eigenspectrum(&f, GramMode::Uncentered, SpectrumNorm::Trace).unwrap();
        assert!((t.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn centered_mode_removes_offset() {
        // Two rows differing only along one axis plus a shared offset.
        let f = Matrix::from_rows(&[vec![5.0, 1.0], vec![5.0, -1.0]]).unwrap();
        assert!((effective_rank_with(&f, GramMode::Centered).unwrap() - 1.0).abs() < 1e-9);
        assert!(effective_rank(&f).unwrap() > 1.0);
    }
}
