//! Answer-quality and attention diagnostics.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::cache::{AttentionEvent, EventKind, LogicalPosition};
use crate::error::{Error, Result};

/// Lowercase, strip ASCII punctuation, drop the articles a/an/the, and
/// split on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_owned)
        .collect()
}

fn overlap<S: AsRef<str>>(pred: &[S], reference: &[S]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    pred.iter()
        .filter(|t| match counts.get_mut(t.as_ref()) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        })
        .count()
}

fn harmonic(hits: usize, pred_len: usize, ref_len: usize) -> f64 {
    if hits == 0 {
        return 0.0;
    }
    // 2PR/(P+R) reduces to this, which rounds once
    2.0 * hits as f64 / (pred_len + ref_len) as f64
}

/// Multiset token overlap F1 of already-tokenized sequences, max over
/// references. Two empty sequences score 1; no references score 0.
pub fn token_f1<S: AsRef<str>>(prediction: &[S], references: &[Vec<S>]) -> f64 {
    references
        .iter()
        .map(|r| {
            if prediction.is_empty() && r.is_empty() {
                1.0
            } else {
                harmonic(overlap(prediction, r), prediction.len(), r.len())
            }
        })
        .fold(0.0, f64::max)
}

/// [`token_f1`] after [`normalize_answer`] on both sides.
pub fn token_f1_text(prediction: &str, references: &[&str]) -> f64 {
    let refs: Vec<_> = references.iter().map(|r| normalize_answer(r)).collect();
    token_f1(&normalize_answer(prediction), &refs)
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 (β = 1), max over references.
pub fn rouge_l_f1<S: AsRef<str>>(prediction: &[S], references: &[Vec<S>]) -> f64 {
    references
        .iter()
        .map(|r| {
            if prediction.is_empty() && r.is_empty() {
                1.0
            } else {
                harmonic(lcs_len(prediction, r), prediction.len(), r.len())
            }
        })
        .fold(0.0, f64::max)
}

pub fn rouge_l_f1_text(prediction: &str, references: &[&str]) -> f64 {
    let refs: Vec<_> = references.iter().map(|r| normalize_answer(r)).collect();
    rouge_l_f1(&normalize_answer(prediction), &refs)
}

/// `1 - distinct / total` over the n-grams of `tokens`; 0 when there are
/// fewer than `n` tokens.
pub fn ngram_repetition_rate<S: AsRef<str>>(tokens: &[S], n: usize) -> f64 {
    if n == 0 || tokens.len() < n {
        return 0.0;
    }
    let total = tokens.len() - n + 1;
    let distinct: HashSet<Vec<&str>> = tokens
        .windows(n)
        .map(|w| w.iter().map(AsRef::as_ref).collect())
        .collect();
    1.0 - distinct.len() as f64 / total as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub token_f1: f64,
    pub rouge_l_f1: f64,
    pub repetition_rate_4gram: f64,
    pub generation_length: usize,
}

impl MetricResult {
    /// Score a generation (raw tokens) against reference answer strings.
    pub fn score<S: AsRef<str>>(generated: &[S], references: &[&str]) -> Self {
        let text = generated.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
        Self {
            token_f1: token_f1_text(&text, references),
            rouge_l_f1: rouge_l_f1_text(&text, references),
            repetition_rate_4gram: ngram_repetition_rate(generated, 4),
            generation_length: generated.len(),
        }
    }
}

/// `100 * f1 / ceiling`, or `None` when the ceiling is zero.
pub fn recovery_pct(f1: f64, ceiling_f1: f64) -> Option<f64> {
    (ceiling_f1 > 0.0).then(|| 100.0 * f1 / ceiling_f1)
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

// ── Attention-mass profile ──────────────────────────────────────────────────

/// Structural regions of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    /// Leading positions whose mass the sink fraction is taken over
    /// (position 0 plus the instruction).
    pub prefix_region: Vec<LogicalPosition>,
    /// Non-sink structural positions whose densities are averaged.
    pub boundary_positions: Vec<LogicalPosition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMassProfile {
    pub sink_fraction: f64,
    pub boundary_relative_density: f64,
    /// Observed over causal-uniform expected mass, per position.
    pub densities: BTreeMap<LogicalPosition, f64>,
}

/// Profile the prefill events of one trace.
///
/// Each event's `step` is its query position. Under causal uniformity a
/// position `p` expects `1 / n_visible` from every query at or after it;
/// mass is averaged over heads.
pub fn attention_mass_profile(
    events: &[AttentionEvent],
    boundary: &BoundarySpec,
) -> Result<AttentionMassProfile> {
    if boundary.prefix_region.is_empty() {
        return Err(Error::InvalidInput("empty prefix region".into()));
    }
    let prefill: Vec<_> = events.iter().filter(|e| e.kind == EventKind::Prefill).collect();
    let mut observed: BTreeMap<LogicalPosition, f64> = BTreeMap::new();
    for e in &prefill {
        for (p, w) in e.mean_weights() {
            *observed.entry(p).or_default() += w;
        }
    }
    let sink = LogicalPosition(0);
    let prefix_mass: f64 = boundary
        .prefix_region
        .iter()
        .map(|p| observed.get(p).copied().unwrap_or(0.0))
        .sum();
    let sink_fraction = if prefix_mass > 0.0 {
        observed.get(&sink).copied().unwrap_or(0.0) / prefix_mass
    } else {
        0.0
    };

    // Expected mass for every position, computed in one sweep from the top.
    let max_pos = prefill.iter().map(|e| e.step).max().unwrap_or(0);
    let mut densities = BTreeMap::new();
    if !prefill.is_empty() {
        let mut per_step = vec![0.0; max_pos as usize + 1];
        for e in &prefill {
            if e.n_visible > 0 {
                per_step[e.step as usize] += 1.0 / e.n_visible as f64;
            }
        }
        let mut tail = 0.0;
        let mut expected_all = vec![0.0; per_step.len()];
        for i in (0..per_step.len()).rev() {
            tail += per_step[i];
            expected_all[i] = tail;
        }
        for (i, &exp) in expected_all.iter().enumerate() {
            if exp > 0.0 {
                let p = LogicalPosition::from(i);
                densities.insert(p, observed.get(&p).copied().unwrap_or(0.0) / exp);
            }
        }
    }

    let boundary_vals: Vec<f64> = boundary
        .boundary_positions
        .iter()
        .filter_map(|p| densities.get(p).copied())
        .collect();
    if boundary_vals.is_empty() {
        return Err(Error::InvalidInput(
            "no boundary position is covered by the trace".into(),
        ));
    }
    let boundary_relative_density = boundary_vals.iter().sum::<f64>() / boundary_vals.len() as f64;

    Ok(AttentionMassProfile {
        sink_fraction,
        boundary_relative_density,
        densities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn f1_worked_examples() {
        assert_eq!(token_f1(&toks("x y"), &[toks("x y")]), 1.0);
        assert_eq!(token_f1(&toks("x y"), &[toks("z w")]), 0.0);
        assert_eq!(token_f1(&toks("a b c"), &[toks("b c d")]), 2.0 / 3.0);
        assert_eq!(token_f1(&[] as &[&str], &[toks("x")]), 0.0);
    }

    #[test]
    fn f1_takes_best_reference() {
        let refs = [toks("nope"), toks("x y z")];
        assert_eq!(token_f1(&toks("x y z"), &refs), 1.0);
        let flipped = [refs[1].clone(), refs[0].clone()];
        assert_eq!(token_f1(&toks("x y z"), &flipped), 1.0);
    }

    #[test]
    fn f1_counts_multiset_overlap() {
        // pred has "x" twice, ref once: overlap 1, P = 1/2, R = 1.
        assert!((token_f1(&toks("x x"), &[toks("x")]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn normalization_recipe() {
        assert_eq!(normalize_answer("The  Code, is: 7F3A!"), vec!["code", "is", "7f3a"]);
        assert_eq!(token_f1_text("An Apple.", &["apple"]), 1.0);
    }

    #[test]
    fn rouge_worked_examples() {
        assert_eq!(rouge_l_f1(&toks("a b c"), &[toks("a b c")]), 1.0);
        assert_eq!(rouge_l_f1(&toks("a c b"), &[toks("a b c")]), 2.0 / 3.0);
        assert_eq!(rouge_l_f1(&[] as &[&str], &[toks("a b")]), 0.0);
    }

    #[test]
    fn repetition_examples() {
        assert_eq!(ngram_repetition_rate(&toks("a b c d e f g"), 4), 0.0);
        let rep = vec!["x"; 100];
        assert!((ngram_repetition_rate(&rep, 4) - (1.0 - 1.0 / 97.0)).abs() < 1e-12);
        assert_eq!(ngram_repetition_rate(&toks("a a a"), 4), 0.0);
    }

    #[test]
    fn recovery_examples() {
        assert!((recovery_pct(0.282, 0.315).unwrap() - 89.5238).abs() < 1e-3);
        assert_eq!(recovery_pct(0.3, 0.3), Some(100.0));
        assert!((recovery_pct(0.086, 0.077).unwrap() - 111.688).abs() < 1e-2);
        assert_eq!(recovery_pct(0.1, 0.0), None);
    }

    #[test]
    fn pearson_three_points() {
        // x = (1,2,3), y = (1,3,2): sxy = 1, sxx = syy = 2 → r = 0.5.
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]), None);
    }

    fn uniform_trace(len: u32) -> Vec<AttentionEvent> {
        (0..len)
            .map(|t| {
                let w = 1.0 / (t + 1) as f64;
                AttentionEvent {
                    step: t as u64,
                    kind: EventKind::Prefill,
                    n_visible: t as usize + 1,
                    normalized: true,
                    heads: vec![(0..=t).map(|p| (LogicalPosition(p), w)).collect(); 2],
                }
            })
            .collect()
    }

    #[test]
    fn uniform_profile_is_flat() {
        let spec = BoundarySpec {
            prefix_region: (0..5).map(LogicalPosition).collect(),
            boundary_positions: vec![LogicalPosition(1), LogicalPosition(30)],
        };
        let prof = attention_mass_profile(&uniform_trace(40), &spec).unwrap();
        for d in prof.densities.values() {
            assert!((d - 1.0).abs() < 1e-9);
        }
        assert!((prof.boundary_relative_density - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sink_only_mass() {
        let events: Vec<_> = (0..10)
            .map(|t| AttentionEvent {
                step: t,
                kind: EventKind::Prefill,
                n_visible: t as usize + 1,
                normalized: true,
                heads: vec![[(LogicalPosition(0), 1.0)].into_iter().collect()],
            })
            .collect();
        let spec = BoundarySpec {
            prefix_region: (0..3).map(LogicalPosition).collect(),
            boundary_positions: vec![LogicalPosition(2)],
        };
        let prof = attention_mass_profile(&events, &spec).unwrap();
        assert_eq!(prof.sink_fraction, 1.0);
        assert_eq!(prof.boundary_relative_density, 0.0);
    }

    #[test]
    fn empty_prefix_region_rejected() {
        let spec = BoundarySpec {
            prefix_region: vec![],
            boundary_positions: vec![LogicalPosition(1)],
        };
        assert!(attention_mass_profile(&uniform_trace(4), &spec).is_err());
    }
}
