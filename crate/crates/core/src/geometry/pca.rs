use crate::error::{Error, Result};
use crate::tensor::{sym_eigen, Matrix};

/// Components whose variance falls below this fraction of the largest are
/// treated as absent.
const RANK_TOL: f64 = 1e-10;

/// Mean-centred principal components.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal axes, largest variance first; at most the data rank.
    pub components: Vec<Vec<f64>>,
    /// Population variance along each axis.
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn fit(features: &Matrix, k: usize) -> Result<Self> {
        let (p, d) = features.shape();
        if p == 0 || d == 0 {
            return Err(Error::Contract("empty feature matrix".into()));
        }
        let mean = features.column_means();
        let centered: Vec<Vec<f64>> = features
            .row_iter()
            .map(|r| r.iter().zip(&mean).map(|(&v, &m)| v as f64 - m).collect())
            .collect();
        let mut axes: Vec<(f64, Vec<f64>)> = Vec::new();
        if p <= d {
            let mut g = vec![0.0; p * p];
            for i in 0..p {
                for j in i..p {
                    let v: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                    g[i * p + j] = v;
                    g[j * p + i] = v;
                }
            }
            let e = sym_eigen(p, &g)?;
            for idx in (0..p).rev() {
                let lambda = e.values[idx];
                let u = e.vector(idx);
                let mut axis = vec![0.0; d];
                for (ui, row) in u.iter().zip(&centered) {
                    for (a, x) in axis.iter_mut().zip(row) {
                        *a += ui * x;
                    }
                }
                axes.push((lambda, axis));
            }
        } else {
            let mut c = vec![0.0; d * d];
            for row in &centered {
                for i in 0..d {
                    for j in i..d {
                        c[i * d + j] += row[i] * row[j];
                    }
                }
            }
            for i in 0..d {
                for j in 0..i {
                    c[i * d + j] = c[j * d + i];
                }
            }
            let e = sym_eigen(d, &c)?;
            for idx in (0..d).rev() {
                axes.push((e.values[idx], e.vector(idx)));
            }
        }
        let top = axes.first().map(|a| a.0).unwrap_or(0.0);
        let mut components = Vec::new();
        let mut variances = Vec::new();
        for (lambda, mut axis) in axes.into_iter().take(k) {
            if !(top > 0.0) || lambda <= RANK_TOL * top {
                break;
            }
            let n = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
            axis.iter_mut().for_each(|v| *v /= n);
            // Deterministic sign: largest-magnitude entry positive.
            let pivot = axis
                .iter()
                .copied()
                .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if pivot < 0.0 {
                axis.iter_mut().for_each(|v| *v = -*v);
            }
            components.push(axis);
            variances.push(lambda / p as f64);
        }
        Ok(Self {
            mean,
            components,
            variances,
        })
    }

    /// Scores `P × k` of features on the fitted axes.
    pub fn project(&self, features: &Matrix) -> Result<Vec<Vec<f64>>> {
        if features.cols() != self.mean.len() {
            return Err(Error::Contract("feature width differs from the fit".into()));
        }
        Ok(features
            .row_iter()
            .map(|r| {
                self.components
                    .iter()
                    .map(|c| {
                        r.iter()
                            .zip(&self.mean)
                            .zip(c)
                            .map(|((&v, &m), &a)| (v as f64 - m) * a)
                            .sum()
                    })
                    .collect()
            })
            .collect())
    }

    /// Centred reconstruction `scores · components`.
    pub fn reconstruct_centered(&self, scores: &[Vec<f64>]) -> Vec<Vec<f64>> {
        scores
            .iter()
            .map(|s| {
                let mut out = vec![0.0; self.mean.len()];
                for (w, c) in s.iter().zip(&self.components) {
                    for (o, a) in out.iter_mut().zip(c) {
                        *o += w * a;
                    }
                }
                out
            })
            .collect()
    }
}

/// Three PCA channels min-max scaled to `[0, 1]` on the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaRgb {
    pub rows: usize,
    pub cols: usize,
    /// Row-major per patch.
    pub pixels: Vec<[f32; 3]>,
}

/// Channels beyond the feature rank, or with no spread, render as 0.5.
pub fn pca_rgb(features: &Matrix, grid_rows: usize, grid_cols: usize) -> Result<PcaRgb> {
    let p = features.rows();
    if p != grid_rows * grid_cols {
        return Err(Error::Contract(format!(
            "{p} patches do not fill a {grid_rows}x{grid_cols} grid"
        )));
    }
    if p < 3 {
        return Err(Error::Contract("PCA-RGB needs at least 3 patches".into()));
    }
    let pca = Pca::fit(features, 3)?;
    let scores = pca.project(features)?;
    let mut pixels = vec![[0.5f32; 3]; p];
    for c in 0..pca.components.len() {
        let (lo, hi) = scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s[c]), hi.max(s[c])));
        if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()).max(1e-300) {
            continue;
        }
        for (px, s) in pixels.iter_mut().zip(&scores) {
            px[c] = ((s[c] - lo) / (hi - lo)) as f32;
        }
    }
    Ok(PcaRgb {
        rows: grid_rows,
        cols: grid_cols,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_features_are_grey() {
        let f = Matrix::from_rows(&vec![vec![0.3, -1.0, 2.0]; 4]).unwrap();
        let out = pca_rgb(&f, 2, 2).unwrap();
        assert!(out.pixels.iter().all(|p| *p == [0.5; 3]));
    }

    #[test]
    fn one_axis_fills_first_channel() {
        let rows: Vec<Vec<f32>> = (0..6).map(|i| vec![1.0 + i as f32, 2.0 * i as f32 - 3.0, 0.5]).collect();
        let out = pca_rgb(&Matrix::from_rows(&rows).unwrap(), 2, 3).unwrap();
        let ch0: Vec<f32> = out.pixels.iter().map(|p| p[0]).collect();
        assert_eq!(ch0.iter().copied().fold(f32::INFINITY, f32::min), 0.0);
        assert_eq!(ch0.iter().copied().fold(f32::NEG_INFINITY, f32::max), 1.0);
        assert!(out.pixels.iter().all(|p| p[1] == 0.5 && p[2] == 0.5));
    }

    #[test]
    fn wide_and_tall_paths_agree_on_variance() {
        let rows: Vec<Vec<f32>> = (0..5)
            .map(|i| (0..3).map(|j| ((i * 7 + j * 3) % 5) as f32 - 0.3 * j as f32).collect())
            .collect();
        let tall = Matrix::from_rows(&rows).unwrap();
        let a = Pca::fit(&tall, 3).unwrap();
        let total: f64 = a.variances.iter().sum();
        let mean = tall.column_means();
        let direct: f64 = tall
            .row_iter()
            .map(|r| r.iter().zip(&mean).map(|(&v, &m)| (v as f64 - m).powi(2)).sum::<f64>())
            .sum::<f64>()
            / 5.0;
        assert!((total - direct).abs() < 1e-9);
    }
}
