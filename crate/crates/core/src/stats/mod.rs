//! Bootstrap confidence intervals and paired sign-flip permutation tests.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::tensor::stream;

/// Mean computed as an offset from the first element, so constant input
/// returns that constant exactly.
pub fn mean(xs: &[f64]) -> f64 {
    match xs.first() {
        None => f64::NAN,
        Some(&x0) => x0 + xs.iter().map(|&x| x - x0).sum::<f64>() / xs.len() as f64,
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let h = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMethod {
    #[default]
    Percentile,
    /// Bias-corrected and accelerated.
    Bca,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Resampled values of `statistic`, one derived stream per resample.
fn resample_stats<F>(samples: &[f64], statistic: &F, resamples: usize, seed: u64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = samples.len();
    (0..resamples)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |buf, b| {
                let mut rng = stream(seed, "bootstrap", b as u64);
                for v in buf.iter_mut() {
                    *v = samples[rng.random_range(0..n)];
                }
                statistic(buf)
            },
        )
        .collect()
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(samples: &[f64], level: f64, resamples: usize, seed: u64) -> Result<Interval> {
    bootstrap_ci_with(samples, &mean, level, resamples, seed, BootstrapMethod::Percentile)
}

pub fn bootstrap_ci_with<F>(
    samples: &[f64],
    statistic: &F,
    level: f64,
    resamples: usize,
    seed: u64,
    method: BootstrapMethod,
) -> Result<Interval>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if samples.is_empty() {
        return Err(Error::Contract("bootstrap needs at least one sample".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Contract(format!("confidence level {level} not in (0, 1)")));
    }
    if resamples == 0 {
        return Err(Error::Contract("bootstrap needs at least one resample".into()));
    }
    let mut stats = resample_stats(samples, statistic, resamples, seed);
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let (qlo, qhi) = match method {
        BootstrapMethod::Percentile => (alpha, 1.0 - alpha),
        BootstrapMethod::Bca => bca_levels(samples, statistic, &stats, alpha).unwrap_or((alpha, 1.0 - alpha)),
    };
    Ok(Interval {
        lo: quantile_sorted(&stats, qlo),
        hi: quantile_sorted(&stats, qhi),
    })
}

/// Adjusted quantile levels, or `None` when the correction is undefined
/// (e.g. a constant statistic).
fn bca_levels<F>(samples: &[f64], statistic: &F, sorted: &[f64], alpha: f64) -> Option<(f64, f64)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let normal = Normal::standard();
    let theta = statistic(samples);
    let b = sorted.len() as f64;
    let below = sorted.iter().filter(|&&s| s < theta).count() as f64;
    let prop = (below / b).clamp(1.0 / (b + 1.0), b / (b + 1.0));
    let z0 = normal.inverse_cdf(prop);

    let n = samples.len();
    if n < 2 {
        return None;
    }
    let jack: Vec<f64> = (0..n)
        .map(|i| {
            let rest: Vec<f64> = samples
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| v)
                .collect();
            statistic(&rest)
        })
        .collect();
    let jm = jack.iter().sum::<f64>() / n as f64;
    let num: f64 = jack.iter().map(|&t| (jm - t).powi(3)).sum();
    let den: f64 = jack.iter().map(|&t| (jm - t).powi(2)).sum();
    if !(den > 0.0) {
        return None;
    }
    let a = num / (6.0 * den.powf(1.5));
    let adjust = |z: f64| {
        let w = z0 + z;
        normal.cdf(z0 + w / (1.0 - a * w))
    };
    let lo = adjust(normal.inverse_cdf(alpha));
    let hi = adjust(normal.inverse_cdf(1.0 - alpha));
    (lo.is_finite() && hi.is_finite()).then_some((lo, hi))
}

/// Per-unit outcomes under two conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedOutcomes {
    pub ids: Vec<String>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedOutcomes {
    pub fn new(ids: Vec<String>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if ids.len() != a.len() || a.len() != b.len() {
            return Err(Error::Contract(format!(
                "paired outcomes of unequal length: {} ids, {} and {} values",
                ids.len(),
                a.len(),
                b.len()
            )));
        }
        let mut sorted = ids.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("paired outcome ids must be unique".into()));
        }
        Ok(Self { ids, a, b })
    }

    /// Units numbered `0..n` by position.
    pub fn indexed(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let ids = (0..a.len()).map(|i| format!("{i:08}")).collect();
        Self::new(ids, a, b)
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self {
            ids: self.ids.clone(),
            a: self.b.clone(),
            b: self.a.clone(),
        }
    }

    /// `a − b` per unit, ordered by id.
    pub fn differences(&self) -> Vec<f64> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&i, &j| self.ids[i].cmp(&self.ids[j]));
        order.into_iter().map(|i| self.a[i] - self.b[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    /// Mean of the per-unit differences.
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Relative slack when comparing permuted and observed statistics.
const TIE_TOL: f64 = 1e-12;

/// Two-sided paired sign-flip test on the mean difference with the
/// add-one estimate `(1 + #{|T*| ≥ |T|}) / (1 + permutations)`.
pub fn sign_flip_permutation_test(
    pairs: &PairedOutcomes,
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    if pairs.is_empty() {
        return Err(Error::Contract("permutation test needs at least one pair".into()));
    }
    // Canonical unit order makes the result independent of input order.
    let d = pairs.differences();
    let n = d.len() as f64;
    let observed = d.iter().sum::<f64>() / n;
    if d.iter().all(|&x| x == 0.0) {
        return Ok(PermutationTest {
            statistic: 0.0,
            p_value: 1.0,
            permutations,
        });
    }
    let threshold = observed.abs() * (1.0 - TIE_TOL);
    let hits: usize = (0..permutations)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, "sign_flip", k as u64);
            let mut s = 0.0;
            let mut bits = 0u64;
            for (i, &x) in d.iter().enumerate() {
                if i % 64 == 0 {
                    bits = rng.random();
                }
                s += if bits & 1 == 1 { x } else { -x };
                bits >>= 1;
            }
            usize::from((s / n).abs() >= threshold)
        })
        .sum();
    Ok(PermutationTest {
        statistic: observed,
        p_value: (1 + hits) as f64 / (1 + permutations) as f64,
        permutations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_samples_give_degenerate_interval() {
        let ci = bootstrap_ci(&[0.1; 7], 0.95, 200, 3).unwrap();
        assert_eq!((ci.lo, ci.hi), (0.1, 0.1));
        let ci = bootstrap_ci_with(&[0.1; 7], &mean, 0.95, 200, 3, BootstrapMethod::Bca).unwrap();
        assert_eq!((ci.lo, ci.hi), (0.1, 0.1));
    }

    #[test]
    fn bootstrap_is_seeded() {
        let xs: Vec<f64> = (0..50).map(|i| (i * 37 % 11) as f64).collect();
        let a = bootstrap_ci(&xs, 0.9, 300, 1).unwrap();
        assert_eq!(a, bootstrap_ci(&xs, 0.9, 300, 1).unwrap());
        assert_ne!(a, bootstrap_ci(&xs, 0.9, 300, 2).unwrap());
    }

    #[test]
    fn bootstrap_rejects_bad_input() {
        assert!(bootstrap_ci(&[], 0.95, 10, 0).is_err());
        assert!(bootstrap_ci(&[1.0], 1.0, 10, 0).is_err());
    }

    #[test]
    fn all_zero_differences_give_one() {
        let p = PairedOutcomes::indexed(vec![1.0, 2.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(sign_flip_permutation_test(&p, 100, 0).unwrap().p_value, 1.0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(PairedOutcomes::new(vec!["a".into(), "a".into()], vec![0.0; 2], vec![0.0; 2]).is_err());
        assert!(PairedOutcomes::new(vec!["a".into()], vec![0.0; 2], vec![0.0; 2]).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    proptest! {
        #[test]
        fn p_value_in_unit_interval_and_order_free(
            a in proptest::collection::vec(-5.0f64..5.0, 1..30),
            shift in -1.0f64..1.0,
            rot in 0usize..30,
        ) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * 0.5 + shift * (i % 3) as f64).collect();
            let p = PairedOutcomes::indexed(a.clone(), b.clone()).unwrap();
            let t = sign_flip_permutation_test(&p, 200, 7).unwrap();
            prop_assert!(t.p_value > 0.0 && t.p_value <= 1.0);
            let swapped = sign_flip_permutation_test(&p.swapped(), 200, 7).unwrap();
            prop_assert_eq!(t.p_value, swapped.p_value);
            let k = rot % a.len();
            let mut ids = p.ids.clone();
            let (mut ra, mut rb) = (a.clone(), b.clone());
            ids.rotate_left(k);
            ra.rotate_left(k);
            rb.rotate_left(k);
            let q = PairedOutcomes::new(ids, ra, rb).unwrap();
            prop_assert_eq!(t.p_value, sign_flip_permutation_test(&q, 200, 7).unwrap().p_value);
        }

        #[test]
        fn percentile_interval_brackets_mean(xs in proptest::collection::vec(-10.0f64..10.0, 2..40), level in 0.5f64..0.99) {
            let ci = bootstrap_ci(&xs, level, 400, 11).unwrap();
            let m = mean(&xs);
            prop_assert!(ci.lo <= m + 1e-12 && m <= ci.hi + 1e-12, "{:?} vs {}", ci, m);
        }
    }
}
