use serde::{Deserialize, Serialize};

use super::probe::{train_softmax, ProbeConfig};
use crate::data::{LabelMap, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Patch features of one image with its full-resolution mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub features: Matrix,
    pub mask: LabelMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    /// `None` for classes absent from both prediction and truth.
    pub per_class: Vec<Option<f64>>,
}

/// Mean IoU over classes present in prediction or truth; pixels labelled
/// [`IGNORE_INDEX`] in the truth are skipped.
pub fn mean_iou(pred: &[u8], truth: &[u8], classes: usize) -> Result<MiouResult> {
    if pred.len() != truth.len() {
        return Err(Error::Contract("prediction and truth sizes differ".into()));
    }
    let mut inter = vec![0u64; classes];
    let mut pcount = vec![0u64; classes];
    let mut tcount = vec![0u64; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if t == IGNORE_INDEX {
            continue;
        }
        let (p, t) = (p as usize, t as usize);
        if p >= classes || t >= classes {
            return Err(Error::Range {
                what: "class",
                index: p.max(t),
                limit: classes,
            });
        }
        pcount[p] += 1;
        tcount[t] += 1;
        if p == t {
            inter[p] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let union = pcount[c] + tcount[c] - inter[c];
            (union > 0).then(|| inter[c] as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Degenerate("no labelled pixels to score".into()));
    }
    Ok(MiouResult {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

/// Per-patch labels: the mask resized to the grid by nearest neighbour.
pub fn patch_labels(mask: &LabelMap, grid: usize) -> Vec<u8> {
    mask.resize_nearest(grid, grid).labels
}

/// Trains a per-patch linear classifier on `train` and scores mIoU on `val`
/// at patch-grid resolution.
pub fn segmentation_probe(
    train: &[SegmentationSample],
    val: &[SegmentationSample],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<MiouResult> {
    let grid_of = |s: &SegmentationSample| -> Result<usize> {
        let p = s.features.rows();
        let g = (p as f64).sqrt().round() as usize;
        if g * g != p {
            return Err(Error::Contract(format!("{p} patches do not form a square grid")));
        }
        Ok(g)
    };
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for s in train {
        let g = grid_of(s)?;
        dim.get_or_insert(s.features.cols());
        for (k, &l) in patch_labels(&s.mask, g).iter().enumerate() {
            if l == IGNORE_INDEX {
                continue;
            }
            if l as usize >= classes {
                return Err(Error::Range {
                    what: "class",
                    index: l as usize,
                    limit: classes,
                });
            }
            rows.extend_from_slice(s.features.row(k));
            labels.push(l as usize);
        }
    }
    let dim = dim.ok_or_else(|| Error::Contract("segmentation probe needs training images".into()))?;
    if labels.is_empty() {
        return Err(Error::Degenerate("every training patch is ignored".into()));
    }
    let x = Matrix::from_vec(labels.len(), dim, rows)?;
    let clf = train_softmax(&x, &labels, classes, cfg)?;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for s in val {
        let g = grid_of(s)?;
        truth.extend(patch_labels(&s.mask, g));
        pred.extend(s.features.row_iter().map(|r| clf.predict(r) as u8));
    }
    mean_iou(&pred, &truth, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_background_on_balanced_two_class() {
        let truth = [0, 0, 1, 1];
        let pred = [0, 0, 0, 0];
        let r = mean_iou(&pred, &truth, 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.0)]);
        assert!((r.miou - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ignore_and_absent_classes() {
        let truth = [0, 255, 0];
        let pred = [0, 2, 0];
        let r = mean_iou(&pred, &truth, 3).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, None]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn one_hot_features_give_perfect_miou() {
        let g = 2;
        let mask = LabelMap {
            width: 4,
            height: 4,
            labels: vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 0, 0, 2, 2, 0, 0],
        };
        let labels = patch_labels(&mask, g);
        assert_eq!(labels, vec![0, 1, 2, 0]);
        let mut f = Matrix::zeros(4, 3);
        for (k, &l) in labels.iter().enumerate() {
            f.set(k, l as usize, 1.0);
        }
        let s = SegmentationSample { features: f, mask };
        let cfg = ProbeConfig {
            lr: 0.1,
            epochs: 100,
            batch_size: 4,
            ..ProbeConfig::segmentation()
        };
        let r = segmentation_probe(std::slice::from_ref(&s), std::slice::from_ref(&s), 3, &cfg).unwrap();
        assert_eq!(r.miou, 1.0);
    }
}
