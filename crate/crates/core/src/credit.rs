//! Online counterfactual credit estimator.
//!
//! A linear model over four min-max-normalized features predicts how much an
//! evicted position was worth, learned from the log-probability deltas that
//! follow each eviction. Its ranking is blended into LRU's with a weight
//! that ramps from 0 to `blend_cap`, and drops back to pure LRU whenever the
//! model's running error exceeds the gate set during warm-up.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheState, LogicalPosition};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreditConfig {
    pub learning_rate: f64,
    pub uncertainty_decay: f64,
    /// Observations whose errors set the gate.
    pub warmup: usize,
    pub gate_quantile: f64,
    pub blend_cap: f64,
    pub ramp_length: usize,
    pub noise_threshold: f64,
}

impl Default for CreditConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            uncertainty_decay: 0.99,
            warmup: 10,
            gate_quantile: 0.9,
            blend_cap: 0.40,
            ramp_length: 50,
            noise_threshold: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub recency: f64,
    pub age: f64,
    pub frequency: f64,
    pub attention: f64,
}

impl FeatureVector {
    pub fn as_array(&self) -> [f64; 4] {
        [self.recency, self.age, self.frequency, self.attention]
    }
}

/// Features of every candidate, each min-max scaled over the candidate set
/// (0.5 when all candidates share a value).
pub fn extract_features(
    state: &CacheState,
    candidates: &[LogicalPosition],
) -> Result<BTreeMap<LogicalPosition, FeatureVector>> {
    let clock = state.step_clock() as f64;
    let mut raw = Vec::with_capacity(candidates.len());
    for &p in candidates {
        let r = state.row(p).ok_or(Error::NotCached(p))?;
        raw.push([
            clock - r.last_access as f64,
            clock - r.admitted_at as f64,
            r.total_frequency() as f64,
            r.sum_cumulative(),
        ]);
    }
    let mut lo = [f64::INFINITY; 4];
    let mut hi = [f64::NEG_INFINITY; 4];
    for v in &raw {
        for i in 0..4 {
            lo[i] = lo[i].min(v[i]);
            hi[i] = hi[i].max(v[i]);
        }
    }
    let scale = |i: usize, x: f64| {
        if hi[i] > lo[i] {
            (x - lo[i]) / (hi[i] - lo[i])
        } else {
            0.5
        }
    };
    Ok(candidates
        .iter()
        .zip(raw)
        .map(|(&p, v)| {
            (
                p,
                FeatureVector {
                    recency: scale(0, v[0]),
                    age: scale(1, v[1]),
                    frequency: scale(2, v[2]),
                    attention: scale(3, v[3]),
                },
            )
        })
        .collect())
}

/// One eviction invocation and what followed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionEventLog {
    pub step: u64,
    pub victims: Vec<VictimRecord>,
    /// Log-probability change of each following step against the baseline
    /// just before the invocation.
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VictimRecord {
    pub position: LogicalPosition,
    pub attention_share: f64,
    pub features: FeatureVector,
}

/// Victims' cumulative attention normalized to shares. All-zero mass gives
/// all-zero shares.
pub fn attention_shares(state: &CacheState, victims: &[LogicalPosition]) -> Vec<f64> {
    let mass: Vec<f64> = victims
        .iter()
        .map(|p| state.row(*p).map_or(0.0, |r| r.sum_cumulative()))
        .collect();
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        mass.iter().map(|m| m / total).collect()
    } else {
        vec![0.0; victims.len()]
    }
}

/// Per-victim regression targets: mean delta times attention share.
pub fn credit_targets(mean_delta: f64, shares: &[f64]) -> Vec<f64> {
    shares.iter().map(|s| mean_delta * s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Observation {
    Updated,
    /// Every delta fell below the noise threshold.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditEstimator {
    pub config: CreditConfig,
    pub weights: [f64; 4],
    pub uncertainty: f64,
    pub observations_seen: usize,
    pub skipped_observations: usize,
    warmup_errors: Vec<f64>,
    gate: Option<f64>,
}

impl CreditEstimator {
    pub fn new(config: CreditConfig) -> Self {
        Self {
            config,
            weights: [0.0; 4],
            uncertainty: 0.0,
            observations_seen: 0,
            skipped_observations: 0,
            warmup_errors: Vec::new(),
            gate: None,
        }
    }

    pub fn predict(&self, f: &FeatureVector) -> f64 {
        self.weights.iter().zip(f.as_array()).map(|(w, x)| w * x).sum()
    }

    /// Uncertainty threshold, known once warm-up completes.
    pub fn gate(&self) -> Option<f64> {
        self.gate
    }

    pub fn is_gated(&self) -> bool {
        match self.gate {
            None => true,
            Some(g) => self.uncertainty > g,
        }
    }

    /// Blend weight given to credit ranks: `cap · min(1, seen / ramp)`, or 0
    /// while warming up or gated.
    pub fn lambda(&self) -> f64 {
        if self.is_gated() {
            return 0.0;
        }
        let ramp = self.config.ramp_length.max(1) as f64;
        self.config.blend_cap * (self.observations_seen as f64 / ramp).min(1.0)
    }

    pub fn observe(&mut self, log: &EvictionEventLog) -> Observation {
        let kept: Vec<f64> = log
            .deltas
            .iter()
            .copied()
            .filter(|d| d.abs() >= self.config.noise_threshold)
            .collect();
        if kept.is_empty() || log.victims.is_empty() {
            self.skipped_observations += 1;
            return Observation::Skipped;
        }
        let mean_delta = kept.iter().sum::<f64>() / kept.len() as f64;
        let shares: Vec<f64> = log.victims.iter().map(|v| v.attention_share).collect();
        let targets = credit_targets(mean_delta, &shares);

        let mut sq_err = 0.0;
        for (v, target) in log.victims.iter().zip(targets) {
            let x = v.features.as_array();
            let err = target - self.predict(&v.features);
            sq_err += err * err;
            for (w, xi) in self.weights.iter_mut().zip(x) {
                *w += self.config.learning_rate * err * xi;
            }
        }
        let err = sq_err / log.victims.len() as f64;

        self.uncertainty = if self.observations_seen == 0 {
            err
        } else {
            let d = self.config.uncertainty_decay;
            d * self.uncertainty + (1.0 - d) * err
        };
        if self.gate.is_none() {
            self.warmup_errors.push(err);
            if self.warmup_errors.len() >= self.config.warmup.max(1) {
                self.gate = Some(quantile(&self.warmup_errors, self.config.gate_quantile));
            }
        }
        self.observations_seen += 1;
        Observation::Updated
    }

    /// Order `lru_order` (LRU's full eviction ranking of the candidates) by
    /// `(1-λ)·LRU rank + λ·credit rank`. The credit ranking evicts the
    /// highest predicted value first; LRU rank breaks every tie.
    pub fn blended_eviction_order(
        &self,
        lru_order: &[LogicalPosition],
        features: &BTreeMap<LogicalPosition, FeatureVector>,
    ) -> Vec<LogicalPosition> {
        let lambda = self.lambda();
        if lambda == 0.0 {
            return lru_order.to_vec();
        }
        self.blend(lru_order, features, lambda)
    }

    fn blend(
        &self,
        lru_order: &[LogicalPosition],
        features: &BTreeMap<LogicalPosition, FeatureVector>,
        lambda: f64,
    ) -> Vec<LogicalPosition> {
        let preds: Vec<f64> = lru_order
            .iter()
            .map(|p| features.get(p).map_or(0.0, |f| self.predict(f)))
            .collect();
        let mut by_credit: Vec<usize> = (0..lru_order.len()).collect();
        by_credit.sort_by(|&a, &b| preds[b].total_cmp(&preds[a]).then(a.cmp(&b)));
        let mut credit_rank = vec![0usize; lru_order.len()];
        for (rank, &i) in by_credit.iter().enumerate() {
            credit_rank[i] = rank;
        }
        let mut combined: Vec<(usize, f64)> = (0..lru_order.len())
            .map(|i| (i, (1.0 - lambda) * i as f64 + lambda * credit_rank[i] as f64))
            .collect();
        combined.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        combined.into_iter().map(|(i, _)| lru_order[i]).collect()
    }
}

impl Default for CreditEstimator {
    fn default() -> Self {
        Self::new(CreditConfig::default())
    }
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Estimator state recorded alongside a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditDiagnostics {
    pub weights: [f64; 4],
    pub uncertainty: f64,
    pub observations_seen: usize,
    pub skipped_observations: usize,
    /// λ in effect at each invocation.
    pub lambda_trajectory: Vec<f64>,
    pub uncertainty_trajectory: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{AttentionEvent, EventKind};

    fn pos(i: u32) -> LogicalPosition {
        LogicalPosition(i)
    }

    fn fv(x: f64) -> FeatureVector {
        FeatureVector {
            recency: x,
            age: x,
            frequency: x,
            attention: x,
        }
    }

    fn log(deltas: Vec<f64>) -> EvictionEventLog {
        EvictionEventLog {
            step: 1,
            victims: vec![
                VictimRecord {
                    position: pos(1),
                    attention_share: 0.75,
                    features: fv(1.0),
                },
                VictimRecord {
                    position: pos(2),
                    attention_share: 0.25,
                    features: fv(0.0),
                },
            ],
            deltas,
        }
    }

    #[test]
    fn features_scale_to_unit_range() {
        let mut s = CacheState::new(8, 1).unwrap();
        s.admit(&[pos(0)]).unwrap();
        s.advance_clock(3);
        s.admit(&[pos(1), pos(2)]).unwrap();
        s.apply_event(&AttentionEvent {
            step: 9,
            kind: EventKind::Decode,
            n_visible: 3,
            normalized: true,
            heads: vec![[(pos(2), 1.0)].into_iter().collect()],
        })
        .unwrap();
        let f = extract_features(&s, &[pos(0), pos(1), pos(2)]).unwrap();
        assert_eq!(f[&pos(2)].recency, 0.0);
        assert_eq!(f[&pos(0)].recency, 1.0);
        assert_eq!(f[&pos(0)].age, 1.0);
        assert_eq!(f[&pos(1)].age, 0.0);
        assert_eq!(f[&pos(2)].attention, 1.0);
    }

    #[test]
    fn equal_candidates_are_half() {
        let mut s = CacheState::new(8, 1).unwrap();
        s.admit(&[pos(0), pos(1)]).unwrap();
        let f = extract_features(&s, &[pos(0), pos(1)]).unwrap();
        assert_eq!(f[&pos(0)], fv(0.5));
        assert_eq!(f[&pos(1)], fv(0.5));
        let single = extract_features(&s, &[pos(1)]).unwrap();
        assert_eq!(single[&pos(1)], fv(0.5));
    }

    #[test]
    fn proportional_targets() {
        let t = credit_targets(-0.4, &[0.75, 0.25]);
        assert!((t[0] + 0.30).abs() < 1e-15);
        assert!((t[1] + 0.10).abs() < 1e-15);
    }

    #[test]
    fn shares_sum_to_one() {
        let mut s = CacheState::new(8, 2).unwrap();
        s.admit(&[pos(0), pos(1), pos(2)]).unwrap();
        s.apply_event(&AttentionEvent {
            step: 1,
            kind: EventKind::Decode,
            n_visible: 3,
            normalized: false,
            heads: vec![
                [(pos(0), 0.3), (pos(1), 0.1)].into_iter().collect(),
                [(pos(0), 0.3), (pos(1), 0.1)].into_iter().collect(),
            ],
        })
        .unwrap();
        let shares = attention_shares(&s, &[pos(0), pos(1)]);
        assert!((shares[0] - 0.75).abs() < 1e-12 && (shares[1] - 0.25).abs() < 1e-12);
        assert_eq!(attention_shares(&s, &[pos(2)]), vec![0.0]);
    }

    #[test]
    fn sub_threshold_deltas_change_nothing() {
        let mut e = CreditEstimator::default();
        let before = e.clone();
        assert_eq!(e.observe(&log(vec![0.001, -0.005])), Observation::Skipped);
        assert_eq!(e.weights, before.weights);
        assert_eq!(e.observations_seen, 0);
        assert_eq!(e.skipped_observations, 1);
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let e = CreditEstimator::default();
        assert_eq!(e.predict(&fv(0.7)), 0.0);
        assert_eq!(e.lambda(), 0.0);
    }

    #[test]
    fn one_update_step_by_hand() {
        let mut e = CreditEstimator::default();
        e.observe(&log(vec![-0.4]));
        // Victim 1: target -0.3, x = 1 → w_i = 0.05 * -0.3 = -0.015.
        // Victim 2: x = 0 → no change.
        for w in e.weights {
            assert!((w + 0.015).abs() < 1e-15);
        }
        // mean squared error of (-0.3)^2 and (-0.1)^2.
        assert!((e.uncertainty - 0.05).abs() < 1e-15);
    }

    #[test]
    fn lambda_ramps_and_caps() {
        let mut e = CreditEstimator::default();
        for _ in 0..200 {
            e.observe(&log(vec![-0.4]));
            assert!(e.lambda() <= 0.40 + 1e-15);
        }
        assert!(!e.is_gated());
        assert!((e.lambda() - 0.40).abs() < 1e-15);
    }

    #[test]
    fn lru_order_during_warmup_or_gate() {
        let order = vec![pos(3), pos(1), pos(2)];
        let feats: BTreeMap<_, _> = order.iter().map(|&p| (p, fv(p.0 as f64 / 3.0))).collect();
        let mut e = CreditEstimator::default();
        e.weights = [1.0; 4];
        assert_eq!(e.blended_eviction_order(&order, &feats), order);
        e.gate = Some(0.01);
        e.observations_seen = 50;
        e.uncertainty = 0.5;
        assert_eq!(e.blended_eviction_order(&order, &feats), order);
    }

    #[test]
    fn reversed_credit_blend_by_hand() {
        // LRU ranks a=0, b=1, c=2; credit ranks c=0, b=1, a=2.
        // 0.6·r + 0.4·c → a 0.8, b 1.0, c 1.2: LRU order survives.
        let order = vec![pos(0), pos(1), pos(2)];
        let feats: BTreeMap<_, _> = [(pos(0), fv(0.0)), (pos(1), fv(0.5)), (pos(2), fv(1.0))].into();
        let mut e = CreditEstimator::default();
        e.weights = [1.0; 4];
        assert_eq!(e.blend(&order, &feats, 0.4), order);
        // At λ = 0.6 the ranks flip: a 1.2, b 1.0, c 0.8.
        assert_eq!(e.blend(&order, &feats, 0.6), vec![pos(2), pos(1), pos(0)]);
    }

    #[test]
    fn gate_is_ninetieth_percentile_of_warmup() {
        let mut e = CreditEstimator::default();
        for i in 0..10 {
            e.observe(&log(vec![-0.1 * (i + 1) as f64]));
        }
        let g = e.gate().unwrap();
        assert!(g > 0.0);
        assert!(e.warmup_errors.iter().filter(|x| **x <= g).count() >= 9);
    }
}
