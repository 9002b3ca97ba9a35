use std::path::Path;

use serde::{Deserialize, Serialize};

use super::knn::{cosine_nearest, row_norms};
use crate::error::{Error, Result};
use crate::stats::{bootstrap_ci, Interval};
use crate::tensor::Matrix;

/// Keypoint annotations for a source/target image pair, in original pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointPair {
    pub source: String,
    pub target: String,
    /// Original `[width, height]` of each image.
    pub source_size: [f64; 2],
    pub target_size: [f64; 2],
    /// `[x, y]` per keypoint.
    pub source_keypoints: Vec<[f64; 2]>,
    pub target_keypoints: Vec<[f64; 2]>,
    pub source_visible: Vec<bool>,
    pub target_visible: Vec<bool>,
    /// Target bounding box `[height, width]`.
    pub target_bbox: [f64; 2],
}

impl KeypointPair {
    pub fn validate(&self) -> Result<()> {
        let n = self.source_keypoints.len();
        if self.target_keypoints.len() != n || self.source_visible.len() != n || self.target_visible.len() != n {
            return Err(Error::Dataset(format!(
                "keypoint pair {}→{} has mismatched keypoint lists",
                self.source, self.target
            )));
        }
        let positive = |v: [f64; 2]| v[0] > 0.0 && v[1] > 0.0;
        if !positive(self.target_bbox) || !positive(self.source_size) || !positive(self.target_size) {
            return Err(Error::Dataset(format!(
                "keypoint pair {}→{} has a non-positive size or bbox",
                self.source, self.target
            )));
        }
        Ok(())
    }

    /// Indices of keypoints visible in both images.
    pub fn mutual(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.source_keypoints.len()).filter(|&i| self.source_visible[i] && self.target_visible[i])
    }
}

/// JSON list of [`KeypointPair`]s; image paths resolve against the manifest
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointManifest {
    pub pairs: Vec<KeypointPair>,
}

impl KeypointManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: KeypointManifest = serde_json::from_slice(&bytes)?;
        let root = path.parent().unwrap_or(Path::new("."));
        for p in &mut m.pairs {
            p.validate()?;
            for name in [&mut p.source, &mut p.target] {
                let full = root.join(&*name);
                if !full.is_file() {
                    return Err(Error::Dataset(format!("missing keypoint image {}", full.display())));
                }
                *name = full.to_string_lossy().into_owned();
            }
        }
        Ok(m)
    }
}

/// Square patch grid over the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_size: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch containing a model-space point, clamped to the grid; the flag
    /// is true when clamping was needed.
    pub fn patch_of(&self, x: f64, y: f64) -> (usize, bool) {
        let g = self.side() as f64;
        let p = self.patch_size as f64;
        let cx = (x / p).floor();
        let cy = (y / p).floor();
        let clamped = !(0.0..g).contains(&cx) || !(0.0..g).contains(&cy);
        let cx = cx.clamp(0.0, g - 1.0) as usize;
        let cy = cy.clamp(0.0, g - 1.0) as usize;
        (cy * self.side() + cx, clamped)
    }

    /// Centre `((i + 0.5) · p)` of a patch in model-space pixels.
    pub fn center(&self, patch: usize) -> (f64, f64) {
        let g = self.side();
        let p = self.patch_size as f64;
        (((patch % g) as f64 + 0.5) * p, ((patch / g) as f64 + 0.5) * p)
    }

    fn to_model(&self, pt: [f64; 2], size: [f64; 2]) -> (f64, f64) {
        let s = self.image_size as f64;
        (pt[0] * s / size[0], pt[1] * s / size[1])
    }

    fn to_original(&self, x: f64, y: f64, size: [f64; 2]) -> (f64, f64) {
        let s = self.image_size as f64;
        (x * size[0] / s, y * size[1] / s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckResult {
    pub pck: f64,
    /// 0/1 per evaluated keypoint, in pair order.
    pub hits: Vec<f64>,
    pub ci: Interval,
    /// Source keypoints that fell outside the image and were clamped.
    pub clamped: usize,
}

fn threshold(pair: &KeypointPair, alpha: f64) -> f64 {
    alpha * pair.target_bbox[0].max(pair.target_bbox[1])
}

fn score(
    pairs: &[KeypointPair],
    grid: PatchGrid,
    alpha: f64,
    mut predict: impl FnMut(usize, usize, &mut usize) -> Result<usize>,
) -> Result<(Vec<f64>, usize)> {
    if !(alpha > 0.0) {
        return Err(Error::Contract(format!("PCK alpha must be positive, got {alpha}")));
    }
    let mut hits = Vec::new();
    let mut clamped = 0;
    for (pi, pair) in pairs.iter().enumerate() {
        pair.validate()?;
        let thr = threshold(pair, alpha);
        for k in pair.mutual() {
            let patch = predict(pi, k, &mut clamped)?;
            let (cx, cy) = grid.center(patch);
            let (px, py) = grid.to_original(cx, cy, pair.target_size);
            let [tx, ty] = pair.target_keypoints[k];
            let dist = ((px - tx).powi(2) + (py - ty).powi(2)).sqrt();
            hits.push(f64::from(u8::from(dist < thr)));
        }
    }
    if clamped > 0 {
        log::info!("{clamped} keypoints outside the image were clamped to the nearest patch");
    }
    Ok((hits, clamped))
}

fn finish(hits: Vec<f64>, clamped: usize, resamples: usize, seed: u64) -> Result<PckResult> {
    if hits.is_empty() {
        return Err(Error::Dataset("no mutually visible keypoints to evaluate".into()));
    }
    let pck = hits.iter().sum::<f64>() / hits.len() as f64;
    let ci = bootstrap_ci(&hits, 0.95, resamples, seed)?;
    Ok(PckResult { pck, hits, ci, clamped })
}

/// PCK@α: source keypoint → its patch → cosine-NN target patch → patch
/// centre, correct when within `α · max(bbox)` of the true target keypoint.
/// `features[i]` holds the (source, target) patch features of `pairs[i]`.
pub fn pck_at_alpha(
    pairs: &[KeypointPair],
    features: &[(Matrix, Matrix)],
    grid: PatchGrid,
    alpha: f64,
    resamples: usize,
    seed: u64,
) -> Result<PckResult> {
    if features.len() != pairs.len() {
        return Err(Error::Contract("one feature pair per keypoint pair is required".into()));
    }
    let p = grid.side() * grid.side();
    if features.iter().any(|(a, b)| a.rows() != p || b.rows() != p) {
        return Err(Error::Contract(format!("patch features must have {p} rows")));
    }
    let norms: Vec<Vec<f64>> = features.iter().map(|(_, t)| row_norms(t)).collect();
    let (hits, clamped) = score(pairs, grid, alpha, |pi, k, clamped| {
        let pair = &pairs[pi];
        let (x, y) = grid.to_model(pair.source_keypoints[k], pair.source_size);
        let (sp, c) = grid.patch_of(x, y);
        *clamped += usize::from(c);
        let (src, tgt) = &features[pi];
        Ok(cosine_nearest(tgt, &norms[pi], src.row(sp), None).expect("nonempty grid"))
    })?;
    finish(hits, clamped, resamples, seed)
}

/// PCK when every prediction is the patch that actually contains the true
/// target keypoint: the ceiling imposed by patch quantization.
pub fn pck_oracle_ceiling(
    pairs: &[KeypointPair],
    grid: PatchGrid,
    alpha: f64,
    resamples: usize,
    seed: u64,
) -> Result<PckResult> {
    let (hits, clamped) = score(pairs, grid, alpha, |pi, k, clamped| {
        let pair = &pairs[pi];
        let (x, y) = grid.to_model(pair.target_keypoints[k], pair.target_size);
        let (tp, c) = grid.patch_of(x, y);
        *clamped += usize::from(c);
        Ok(tp)
    })?;
    finish(hits, clamped, resamples, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_at_centers(grid: PatchGrid) -> KeypointPair {
        let s = grid.image_size as f64;
        let pts: Vec<[f64; 2]> = [0, 5, 10, 15]
            .iter()
            .map(|&p| {
                let (x, y) = grid.center(p);
                [x, y]
            })
            .collect();
        KeypointPair {
            source: "a".into(),
            target: "b".into(),
            source_size: [s, s],
            target_size: [s, s],
            source_keypoints: pts.clone(),
            target_keypoints: pts,
            source_visible: vec![true, true, true, false],
            target_visible: vec![true; 4],
            target_bbox: [s, s],
        }
    }

    #[test]
    fn identical_features_at_centers_score_one() {
        let grid = PatchGrid {
            image_size: 16,
            patch_size: 4,
        };
        let mut f = Matrix::zeros(16, 16);
        for i in 0..16 {
            f.set(i, i, 1.0);
        }
        let pair = pair_at_centers(grid);
        let r = pck_at_alpha(&[pair], &[(f.clone(), f)], grid, 1e-6, 10, 0).unwrap();
        assert_eq!(r.hits.len(), 3);
        assert_eq!(r.pck, 1.0);
    }

    #[test]
    fn clamping_is_counted() {
        let grid = PatchGrid {
            image_size: 16,
            patch_size: 4,
        };
        assert_eq!(grid.patch_of(-3.0, 2.0), (0, true));
        assert_eq!(grid.patch_of(16.0, 15.9), (15, true));
        assert_eq!(grid.patch_of(5.0, 9.0), (9, false));
    }

    #[test]
    fn alpha_must_be_positive() {
        let grid = PatchGrid {
            image_size: 16,
            patch_size: 4,
        };
        assert!(pck_oracle_ceiling(&[pair_at_centers(grid)], grid, 0.0, 10, 0).is_err());
    }
}
