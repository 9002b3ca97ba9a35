use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{stream, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    /// Adam with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub task: ProbeTask,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

impl ProbeConfig {
    /// Momentum SGD, lr 0.01, cosine, 100 epochs, batch 256.
    pub fn classification() -> Self {
        Self {
            task: ProbeTask::Classification,
            optimizer: Optimizer::Sgd { momentum: 0.9 },
            lr: 0.01,
            weight_decay: 0.0,
            epochs: 100,
            batch_size: 256,
            schedule: Schedule::Cosine,
            seed: 42,
        }
    }

    /// AdamW, lr 1e-3, weight decay 1e-2, cosine.
    pub fn segmentation() -> Self {
        Self {
            task: ProbeTask::Segmentation,
            optimizer: Optimizer::AdamW {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr: 1e-3,
            weight_decay: 1e-2,
            epochs: 20,
            batch_size: 256,
            schedule: Schedule::Cosine,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) || self.batch_size == 0 || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid probe config {self:?}")));
        }
        Ok(())
    }
}

/// `K × d` weights plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub classes: usize,
    pub dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn logits(&self, x: &[f32], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let w = &self.weight[k * self.dim..(k + 1) * self.dim];
            *o = self.bias[k] + w.iter().zip(x).map(|(&a, &b)| a * b as f64).sum::<f64>();
        }
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, x: &[f32]) -> usize {
        let mut z = vec![0.0; self.classes];
        self.logits(x, &mut z);
        argmax(&z)
    }

    pub fn predict_all(&self, features: &Matrix) -> Vec<usize> {
        features.row_iter().map(|r| self.predict(r)).collect()
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Multinomial logistic regression by minibatch descent, `f64` throughout.
/// Deterministic given `cfg.seed`.
pub fn train_softmax(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearClassifier> {
    cfg.validate()?;
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(Error::Contract(format!("{n} feature rows but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Contract("probe needs training data".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Range {
            what: "label",
            index: bad,
            limit: classes,
        });
    }
    let np = classes * (d + 1);
    let mut params = vec![0.0f64; np];
    let mut m1 = vec![0.0f64; np];
    let mut m2 = vec![0.0f64; np];
    let mut grad = vec![0.0f64; np];
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut z = vec![0.0; classes];
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, "probe/epoch", epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let x = features.row(i);
                for (k, zk) in z.iter_mut().enumerate() {
                    let w = &params[k * (d + 1)..k * (d + 1) + d];
                    *zk = params[k * (d + 1) + d] + w.iter().zip(x).map(|(&a, &b)| a * b as f64).sum::<f64>();
                }
                let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
                for k in 0..classes {
                    let p = (z[k] - zmax).exp() / s;
                    let e = p - f64::from(u8::from(labels[i] == k));
                    let g = &mut grad[k * (d + 1)..(k + 1) * (d + 1)];
                    for (gj, &xj) in g[..d].iter_mut().zip(x) {
                        *gj += e * xj as f64;
                    }
                    g[d] += e;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let lr = match cfg.schedule {
                Schedule::Constant => cfg.lr,
                Schedule::Cosine => 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total).cos()),
            };
            step += 1;
            match cfg.optimizer {
                Optimizer::Sgd { momentum } => {
                    for j in 0..np {
                        let g = grad[j] * inv + cfg.weight_decay * params[j];
                        m1[j] = momentum * m1[j] + g;
                        params[j] -= lr * m1[j];
                    }
                }
                Optimizer::AdamW { beta1, beta2, eps } => {
                    let t = step as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for j in 0..np {
                        let g = grad[j] * inv;
                        m1[j] = beta1 * m1[j] + (1.0 - beta1) * g;
                        m2[j] = beta2 * m2[j] + (1.0 - beta2) * g * g;
                        params[j] -= lr * cfg.weight_decay * params[j];
                        params[j] -= lr * (m1[j] / c1) / ((m2[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
    let mut weight = Vec::with_capacity(classes * d);
    let mut bias = Vec::with_capacity(classes);
    for k in 0..classes {
        weight.extend_from_slice(&params[k * (d + 1)..k * (d + 1) + d]);
        bias.push(params[k * (d + 1) + d]);
    }
    Ok(LinearClassifier {
        classes,
        dim: d,
        weight,
        bias,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub classifier: LinearClassifier,
    /// Top-1 accuracy on the validation split.
    pub accuracy: f64,
    /// Per-example 0/1 correctness on the validation split.
    pub correct: Vec<f64>,
    /// Training data held a single class; the probe is a constant predictor.
    pub degenerate: bool,
}

/// Trains on `(train_x, train_y)` and scores top-1 on the validation split.
pub fn train_linear_probe(
    train_x: &Matrix,
    train_y: &[usize],
    val_x: &Matrix,
    val_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if val_x.rows() != val_y.len() || val_x.rows() == 0 {
        return Err(Error::Contract("validation split is empty or mislabelled".into()));
    }
    if val_x.cols() != train_x.cols() {
        return Err(Error::Contract("train and validation feature widths differ".into()));
    }
    let distinct = {
        let mut v = train_y.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let degenerate = distinct.len() < 2;
    let classifier = if degenerate && !distinct.is_empty() {
        log::warn!("linear probe trained on a single class; reporting a constant predictor");
        let mut bias = vec![0.0; classes];
        bias[distinct[0]] = 1.0;
        LinearClassifier {
            classes,
            dim: train_x.cols(),
            weight: vec![0.0; classes * train_x.cols()],
            bias,
        }
    } else {
        train_softmax(train_x, train_y, classes, cfg)?
    };
    let correct: Vec<f64> = classifier
        .predict_all(val_x)
        .iter()
        .zip(val_y)
        .map(|(p, y)| f64::from(u8::from(p == y)))
        .collect();
    let accuracy = correct.iter().sum::<f64>() / correct.len() as f64;
    Ok(ProbeResult {
        classifier,
        accuracy,
        correct,
        degenerate,
    })
}

/// Per-class shuffled split; each class contributes `round(n_c · val_fraction)`
/// examples to validation. Both index lists come back sorted.
pub fn stratified_split(labels: &[usize], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction {val_fraction} not in [0, 1)")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut stream(seed, "split", c as u64));
        let k = (idx.len() as f64 * val_fraction).round() as usize;
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let (tr, va) = stratified_split(&labels, 0.2, 42).unwrap();
        assert_eq!(tr.len() + va.len(), 100);
        for c in 0..4 {
            assert_eq!(va.iter().filter(|&&i| labels[i] == c).count(), 5);
        }
        assert!(tr.iter().all(|i| !va.contains(i)));
        assert_eq!((tr.clone(), va.clone()), stratified_split(&labels, 0.2, 42).unwrap());
    }

    #[test]
    fn constant_features_predict_majority() {
        let x = Matrix::from_rows(&vec![vec![1.0, 1.0]; 10]).unwrap();
        let y = vec![0, 1, 1, 1, 0, 1, 1, 1, 0, 1];
        let cfg = ProbeConfig {
            epochs: 50,
            batch_size: 4,
            lr: 0.1,
            ..ProbeConfig::classification()
        };
        let r = train_linear_probe(&x, &y, &x, &y, 2, &cfg).unwrap();
        assert!((r.accuracy - 0.7).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_flagged() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let r = train_linear_probe(&x, &[1, 1], &x, &[1, 0], 2, &ProbeConfig::classification()).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn adamw_learns_simple_rule() {
        let rows: Vec<Vec<f32>> = (0..40).map(|i| vec![(i as f32 - 19.5) / 10.0, 1.0]).collect();
        let y: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let cfg = ProbeConfig {
            lr: 0.05,
            epochs: 200,
            batch_size: 8,
            ..ProbeConfig::segmentation()
        };
        let r = train_linear_probe(&x, &y, &x, &y, 2, &cfg).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }
}
