use crate::error::{Error, Result};
use crate::stats::{bootstrap_ci, Interval};
use crate::tensor::{dot, norm, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    pub recall: f64,
    /// 0/1 per query.
    pub hits: Vec<f64>,
    pub ci: Interval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnOptions {
    /// Query `i` may not retrieve gallery item `i` (gallery and queries are
    /// the same set).
    pub exclude_self: bool,
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for KnnOptions {
    fn default() -> Self {
        Self {
            exclude_self: false,
            level: 0.95,
            resamples: 1000,
            seed: 0,
        }
    }
}

/// Index of the most cosine-similar gallery row; ties go to the lowest
/// index and zero-norm rows never win against a nonzero one.
pub fn cosine_nearest(gallery: &Matrix, gallery_norms: &[f64], query: &[f32], skip: Option<usize>) -> Option<usize> {
    let qn = norm(query);
    let mut best: Option<(usize, f64)> = None;
    for (g, row) in gallery.row_iter().enumerate() {
        if Some(g) == skip {
            continue;
        }
        let denom = qn * gallery_norms[g];
        let sim = if denom > 0.0 { dot(row, query) / denom } else { f64::NEG_INFINITY };
        if best.is_none_or(|(_, b)| sim > b) {
            best = Some((g, sim));
        }
    }
    best.map(|(g, _)| g)
}

pub fn row_norms(m: &Matrix) -> Vec<f64> {
    m.row_iter().map(norm).collect()
}

/// Recall@1 of cosine nearest-neighbour retrieval with a percentile
/// bootstrap interval over queries.
pub fn knn_recall_at_1(
    gallery: &Matrix,
    queries: &Matrix,
    truth: &[usize],
    options: &KnnOptions,
) -> Result<KnnResult> {
    if gallery.rows() < 2 {
        return Err(Error::Contract("kNN retrieval needs at least two gallery items".into()));
    }
    if gallery.cols() != queries.cols() {
        return Err(Error::Contract("gallery and query feature widths differ".into()));
    }
    if truth.len() != queries.rows() || queries.rows() == 0 {
        return Err(Error::Contract("one ground-truth index per query is required".into()));
    }
    if options.exclude_self && queries.rows() > gallery.rows() {
        return Err(Error::Contract("self-exclusion needs queries aligned with the gallery".into()));
    }
    let norms = row_norms(gallery);
    let hits: Vec<f64> = queries
        .row_iter()
        .enumerate()
        .map(|(q, row)| {
            let skip = options.exclude_self.then_some(q);
            let nn = cosine_nearest(gallery, &norms, row, skip);
            f64::from(u8::from(nn == Some(truth[q])))
        })
        .collect();
    let recall = hits.iter().sum::<f64>() / hits.len() as f64;
    let ci = bootstrap_ci(&hits, options.level, options.resamples, options.seed)?;
    Ok(KnnResult { recall, hits, ci })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_copies_are_found() {
        let g = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let r = knn_recall_at_1(&g, &g, &[0, 1, 2], &KnnOptions::default()).unwrap();
        assert_eq!(r.recall, 1.0);
        assert_eq!((r.ci.lo, r.ci.hi), (1.0, 1.0));
    }

    #[test]
    fn self_exclusion_skips_identity() {
        let g = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]]).unwrap();
        let opts = KnnOptions {
            exclude_self: true,
            ..KnnOptions::default()
        };
        let r = knn_recall_at_1(&g, &g, &[1, 0, 1], &opts).unwrap();
        assert_eq!(r.hits, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn single_item_gallery_rejected() {
        let g = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(knn_recall_at_1(&g, &g, &[0], &KnnOptions::default()).is_err());
    }
}
