//! Paired statistics: Wilcoxon signed-rank, TOST equivalence, percentile
//! bootstrap, Holm step-down and the exact sign test.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Largest number of non-zero differences handled by the exact Wilcoxon
/// null distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 12;
pub const DEFAULT_TOST_MARGIN: f64 = 0.02;
pub const DEFAULT_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    WilcoxonExact,
    WilcoxonNormal,
    Tost,
    SignExact,
    /// No non-zero differences: p = 1 by convention.
    NoSignal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub margin: Option<f64>,
    pub n: usize,
}

/// Per-item scores of two conditions, aligned by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub ids: Vec<String>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSample {
    /// Align two keyed score maps; every id must appear in both.
    pub fn from_maps(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<Self> {
        let only_a: Vec<_> = a.keys().filter(|k| !b.contains_key(*k)).cloned().collect();
        let only_b: Vec<_> = b.keys().filter(|k| !a.contains_key(*k)).cloned().collect();
        if !only_a.is_empty() || !only_b.is_empty() {
            return Err(Error::MismatchedItems(format!(
                "only in A: {only_a:?}; only in B: {only_b:?}"
            )));
        }
        Ok(Self {
            ids: a.keys().cloned().collect(),
            a: a.values().copied().collect(),
            b: a.keys().map(|k| b[k]).collect(),
        })
    }

    /// `a - b` per item.
    pub fn diffs(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(x, y)| x - y).collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn no_signal(n: usize) -> TestResult {
    TestResult {
        statistic: 0.0,
        p_value: 1.0,
        method: Method::NoSignal,
        margin: None,
        n,
    }
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired differences. Zeros are
/// dropped. The statistic is W+, the rank sum of positive differences.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> TestResult {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return no_signal(0);
    }
    let ranks = average_ranks(&nz.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    if n <= WILCOXON_EXACT_MAX_N {
        // Doubled ranks are integers even with half-rank ties.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0u64; total + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let obs = (2.0 * w_plus).round() as usize;
        let denom = (1u64 << n) as f64;
        let lower: u64 = counts[..=obs].iter().sum();
        let upper: u64 = counts[obs..].iter().sum();
        let p = (2.0 * lower.min(upper) as f64 / denom).min(1.0);
        return TestResult {
            statistic: w_plus,
            p_value: p,
            method: Method::WilcoxonExact,
            margin: None,
            n,
        };
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p = if var > 0.0 {
        let z = (w_plus - mean) / var.sqrt();
        (2.0 * standard_normal().sf(z.abs())).min(1.0)
    } else {
        1.0
    };
    TestResult {
        statistic: w_plus,
        p_value: p,
        method: Method::WilcoxonNormal,
        margin: None,
        n,
    }
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Two one-sided paired t-tests against `±margin`. Equivalence holds when
/// the returned p is below α. With zero variance the decision is exact:
/// p = 0 inside the margin, 1 otherwise.
pub fn tost_equivalence(diffs: &[f64], margin: f64) -> Result<TestResult> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("TOST needs at least 2 pairs, got {n}")));
    }
    if !(margin > 0.0) {
        return Err(Error::InvalidInput(format!("margin {margin} must be positive")));
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let se = (var / nf).sqrt();
    let result = |statistic: f64, p_value: f64| TestResult {
        statistic,
        p_value,
        method: Method::Tost,
        margin: Some(margin),
        n,
    };
    if se == 0.0 {
        let p = if mean.abs() < margin { 0.0 } else { 1.0 };
        return Ok(result(mean, p));
    }
    let t = StudentsT::new(0.0, 1.0, nf - 1.0)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let t_lower = (mean + margin) / se;
    let t_upper = (mean - margin) / se;
    let p_lower = t.sf(t_lower);
    let p_upper = t.cdf(t_upper);
    let (stat, p) = if p_lower >= p_upper {
        (t_lower, p_lower)
    } else {
        (t_upper, p_upper)
    };
    Ok(result(stat, p.clamp(0.0, 1.0)))
}

/// Two-sided exact binomial test on the signs of non-zero differences.
pub fn exact_sign_test(diffs: &[f64]) -> TestResult {
    let pos = diffs.iter().filter(|d| **d > 0.0).count();
    let neg = diffs.iter().filter(|d| **d < 0.0).count();
    let n = pos + neg;
    if n == 0 {
        return no_signal(0);
    }
    let bin = Binomial::new(0.5, n as u64).expect("valid binomial");
    let tail = bin.cdf(pos.min(neg) as u64);
    TestResult {
        statistic: pos as f64,
        p_value: (2.0 * tail).min(1.0),
        method: Method::SignExact,
        margin: None,
        n,
    }
}

/// Holm step-down adjusted p-values, returned in input order.
pub fn holm_bonferroni(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]).then(i.cmp(&j)));
    let mut adjusted = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        let a = ((m - rank) as f64 * p_values[i]).min(1.0);
        running = running.max(a);
        adjusted[i] = running;
    }
    adjusted
}

/// Which hypotheses Holm rejects at level `alpha`.
pub fn holm_reject(p_values: &[f64], alpha: f64) -> Vec<bool> {
    holm_bonferroni(p_values).into_iter().map(|p| p < alpha).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

/// Means of `resamples` with-replacement resamples of `values`.
pub fn bootstrap_resample_means(values: &[f64], resamples: usize, seed: u64) -> Vec<f64> {
    let n = values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect()
}

/// Type-7 (linear interpolation) quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<Interval> {
    if values.is_empty() {
        return Err(Error::InvalidInput("bootstrap of an empty sample".into()));
    }
    if !(0.0 < level && level < 1.0) || resamples == 0 {
        return Err(Error::InvalidInput(format!(
            "bootstrap level {level} / resamples {resamples}"
        )));
    }
    if values.iter().all(|v| *v == values[0]) {
        return Ok(Interval {
            lower: values[0],
            upper: values[0],
        });
    }
    let mut means = bootstrap_resample_means(values, resamples, seed);
    means.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(Interval {
        lower: quantile_sorted(&means, alpha / 2.0),
        upper: quantile_sorted(&means, 1.0 - alpha / 2.0),
    })
}

/// Bootstrap interval of the mean paired difference `a - b`, resampling
/// items as pairs.
pub fn bootstrap_paired_ci(
    sample: &PairedSample,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<Interval> {
    bootstrap_ci(&sample.diffs(), resamples, level, seed)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}
