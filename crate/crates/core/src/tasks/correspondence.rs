use serde::{Deserialize, Serialize};

use super::knn::{cosine_nearest, row_norms};
use crate::data::ViewTransform;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Two views of one image with their patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondencePair {
    pub image_id: String,
    pub views: [ViewTransform; 2],
    /// Row-major patch features for each view.
    pub features: [Matrix; 2],
    pub grid: usize,
    pub patch_size: usize,
}

impl CorrespondencePair {
    fn check(&self) -> Result<()> {
        let p = self.grid * self.grid;
        for (f, v) in self.features.iter().zip(&self.views) {
            if f.rows() != p {
                return Err(Error::Contract(format!(
                    "view has {} patch rows, grid needs {p}",
                    f.rows()
                )));
            }
            if v.out_size != self.grid * self.patch_size {
                return Err(Error::Contract(format!(
                    "view rendered at {} px, grid covers {}",
                    v.out_size,
                    self.grid * self.patch_size
                )));
            }
            let [_, _, w, h] = v.crop;
            if !(w > 0.0 && h > 0.0) {
                return Err(Error::Contract("crop transform is not invertible".into()));
            }
        }
        if self.features[0].cols() != self.features[1].cols() {
            return Err(Error::Contract("view feature widths differ".into()));
        }
        Ok(())
    }

    /// For each patch of view A, the view-B patch containing its centre after
    /// mapping through both transforms, or `None` when it lands outside B.
    pub fn ground_truth(&self) -> Vec<Option<usize>> {
        let g = self.grid;
        let p = self.patch_size as f64;
        let [a, b] = &self.views;
        (0..g * g)
            .map(|k| {
                let (r, c) = (k / g, k % g);
                let (sx, sy) = a.view_to_source((c as f64 + 0.5) * p, (r as f64 + 0.5) * p);
                let (u, v) = b.source_to_view(sx, sy);
                b.contains_view_point(u, v)
                    .then(|| (v / p).floor() as usize * g + (u / p).floor() as usize)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceScore {
    /// Source patches with ground truth inside view B.
    pub evaluated: usize,
    pub accuracy: f64,
    /// Fraction of evaluated patches whose A→B→A nearest-neighbour chain
    /// returns to the starting patch.
    pub cycle_consistency: f64,
}

fn chebyshev(a: usize, b: usize, grid: usize) -> usize {
    let (ra, ca) = (a / grid, a % grid);
    let (rb, cb) = (b / grid, b % grid);
    ra.abs_diff(rb).max(ca.abs_diff(cb))
}

/// Nearest-neighbour matching from view A to view B scored at one Chebyshev
/// grid tolerance. `Ok(None)` when no patch of A lands inside B.
pub fn patch_correspondence(pair: &CorrespondencePair, tolerance: usize) -> Result<Option<CorrespondenceScore>> {
    Ok(patch_correspondence_multi(pair, &[tolerance])?.map(|(s, _)| s[0]))
}

/// Like [`patch_correspondence`] for several tolerances at once; also
/// returns the predicted B patch for every A patch.
pub fn patch_correspondence_multi(
    pair: &CorrespondencePair,
    tolerances: &[usize],
) -> Result<Option<(Vec<CorrespondenceScore>, Vec<usize>)>> {
    pair.check()?;
    let truth = pair.ground_truth();
    let evaluated = truth.iter().filter(|t| t.is_some()).count();
    if evaluated == 0 {
        return Ok(None);
    }
    let [fa, fb] = &pair.features;
    let (na, nb) = (row_norms(fa), row_norms(fb));
    let forward: Vec<usize> = fa
        .row_iter()
        .map(|r| cosine_nearest(fb, &nb, r, None).expect("nonempty grid"))
        .collect();
    let mut back_cache = vec![None; fb.rows()];
    let mut cycles = 0usize;
    let mut correct = vec![0usize; tolerances.len()];
    for (k, t) in truth.iter().enumerate() {
        let Some(t) = *t else { continue };
        let m = forward[k];
        let back = *back_cache[m].get_or_insert_with(|| cosine_nearest(fa, &na, fb.row(m), None).expect("nonempty grid"));
        cycles += usize::from(back == k);
        let dist = chebyshev(m, t, pair.grid);
        for (c, &tol) in correct.iter_mut().zip(tolerances) {
            *c += usize::from(dist <= tol);
        }
    }
    let scores = correct
        .iter()
        .map(|&c| CorrespondenceScore {
            evaluated,
            accuracy: c as f64 / evaluated as f64,
            cycle_consistency: cycles as f64 / evaluated as f64,
        })
        .collect();
    Ok(Some((scores, forward)))
}
