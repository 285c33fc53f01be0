//! Deterministic toy retrieval model.
//!
//! The toy answers with the needle's code words only while the sink, some
//! instruction token, the whole question region and every answer position
//! are cached; otherwise it falls into a four-word loop until the token cap.
//!
//! Its prefill attention is built so that, over a full cache, position 0
//! holds `sink_fraction` of the mass landing on sink + instruction, and the
//! instruction and question tokens together average `boundary_density`
//! times their causal-uniform expectation. Each item also carries a latent
//! [`Referral`]: late queries refer back to the instruction, to the
//! question, or to neither. That is what lets recency-driven eviction keep
//! one boundary side without the guard.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BenchItem, CacheView, DecodeOutput, ModelAdapter};
use crate::cache::{AttentionEvent, EventKind, LogicalPosition};
use crate::error::{Error, Result};
use crate::seed::{fnv1a, mix};

pub const FILLER_LOOP: [&str; 4] = ["and", "then", "so", "it"];

/// How each head splits local-window mass over (self, t-1, t-2).
const LOCAL_SPLITS: [[f64; 3]; 4] = [
    [0.5, 0.3, 0.2],
    [0.2, 0.5, 0.3],
    [0.4, 0.2, 0.4],
    [0.6, 0.25, 0.15],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub n_heads: usize,
    pub sink_fraction: f64,
    pub boundary_density: f64,
    /// Per code word, from each content query after the needle.
    pub needle_eps: f64,
    /// Total over the code words, from each question query.
    pub needle_question: f64,
    /// Total over the code words, per decode step.
    pub needle_decode: f64,
    /// Instruction mass any single burst query may carry.
    pub burst_cap: f64,
    pub min_burst: usize,
    /// Instruction mass re-attended from the question under
    /// [`Referral::Instruction`].
    pub echo: f64,
    pub p_instruction: f64,
    pub p_question: f64,
    pub answer_logprob: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_heads: 4,
            sink_fraction: 0.75,
            boundary_density: 0.41,
            needle_eps: 0.02,
            needle_question: 0.3,
            needle_decode: 0.45,
            burst_cap: 0.35,
            min_burst: 16,
            echo: 1e-4,
            p_instruction: 0.3,
            p_question: 0.3,
            answer_logprob: -0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Referral {
    Instruction,
    Question,
    None,
}

#[derive(Debug, Clone)]
struct Prepared {
    item: BenchItem,
    /// Full-cache per-head rows, keyed by query position.
    rows: BTreeMap<usize, Vec<BTreeMap<LogicalPosition, f64>>>,
}

#[derive(Debug, Clone)]
pub struct ToyAdapter {
    config: ToyConfig,
    current: Option<Prepared>,
}

impl ToyAdapter {
    pub fn new(config: ToyConfig) -> Self {
        Self {
            config,
            current: None,
        }
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(ToyConfig {
            seed,
            ..ToyConfig::default()
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// The item's latent referral, fixed by adapter seed and item id.
    pub fn referral(&self, item_id: &str) -> Referral {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, fnv1a(item_id)));
        let u: f64 = rng.gen();
        if u < self.config.p_instruction {
            Referral::Instruction
        } else if u < self.config.p_instruction + self.config.p_question {
            Referral::Question
        } else {
            Referral::None
        }
    }

    fn prepared(&self) -> Result<&Prepared> {
        self.current
            .as_ref()
            .ok_or_else(|| Error::Adapter("toy adapter used before begin()".into()))
    }

    fn build_rows(&self, item: &BenchItem) -> Result<BTreeMap<usize, Vec<BTreeMap<LogicalPosition, f64>>>> {
        let cfg = &self.config;
        let bad = |why: &str| Error::Adapter(format!("item {}: {why}", item.id));
        let len = item.prompt.len();
        let instr = &item.regions.instruction;
        let question = &item.regions.question;
        let answer = &item.regions.answer;
        if instr.is_empty() || instr.iter().enumerate().any(|(i, &p)| p != i + 1) {
            return Err(bad("instruction must occupy positions 1..=n"));
        }
        if question.is_empty()
            || *question.last().expect("non-empty") != len - 1
            || question.windows(2).any(|w| w[1] != w[0] + 1)
        {
            return Err(bad("question must be a contiguous prompt suffix"));
        }
        let i_last = *instr.last().expect("non-empty");
        let first_query = i_last + 1;
        let q0 = question[0];
        if first_query >= q0 {
            return Err(bad("no context between instruction and question"));
        }

        let referral = self.referral(&item.id);
        let expected = |b: usize| -> f64 {
            (b.max(first_query)..len).map(|t| 1.0 / (t + 1) as f64).sum()
        };
        let n_boundary = (instr.len() + question.len()) as f64;
        let d_q = if referral == Referral::Question {
            cfg.boundary_density
        } else {
            0.0
        };
        let d_i = (cfg.boundary_density * n_boundary - d_q * question.len() as f64) / instr.len() as f64;
        let m_instr: Vec<f64> = instr.iter().map(|&b| d_i * expected(b)).collect();
        let m_question: Vec<f64> = question.iter().map(|&q| d_q * expected(q)).collect();
        let instr_total: f64 = m_instr.iter().sum();

        let n_emitted = len - first_query;
        let sink_total = cfg.sink_fraction / (1.0 - cfg.sink_fraction) * instr_total;
        let sink_each = sink_total / n_emitted as f64;
        let burst = ((instr_total / cfg.burst_cap).ceil() as usize)
            .max(cfg.min_burst)
            .min(q0 - first_query);
        // Echo reaches the instruction from the 2nd and 3rd question queries.
        let echo_queries: Vec<usize> = if referral == Referral::Instruction && question.len() >= 3 {
            vec![question[1], question[2]]
        } else {
            Vec::new()
        };
        let echo = if echo_queries.is_empty() { 0.0 } else { cfg.echo };

        let is_boundary = |p: usize| p <= i_last || p >= q0;
        let pos = LogicalPosition::from;
        let mut rows = BTreeMap::new();
        for t in first_query..len {
            let mut shared: BTreeMap<LogicalPosition, f64> = BTreeMap::new();
            let mut add = |p: usize, w: f64| {
                if w > 0.0 {
                    *shared.entry(pos(p)).or_insert(0.0) += w;
                }
            };
            add(0, sink_each);
            if t < first_query + burst {
                for (k, &b) in instr.iter().enumerate() {
                    let m = if b == i_last { m_instr[k] - echo } else { m_instr[k] };
                    add(b, m / burst as f64);
                }
            }
            let in_question = t >= q0;
            if !answer.is_empty() {
                if in_question {
                    for &a in answer {
                        add(a, cfg.needle_question / answer.len() as f64);
                    }
                } else if t > *answer.iter().max().expect("non-empty") {
                    for &a in answer {
                        add(a, cfg.needle_eps);
                    }
                }
            }
            if in_question {
                for (k, &q) in question.iter().enumerate() {
                    if q <= t {
                        add(q, m_question[k] / (len - q) as f64);
                    }
                }
                if echo_queries.contains(&t) {
                    add(i_last, echo / echo_queries.len() as f64);
                }
            }
            let remainder = 1.0 - shared.values().sum::<f64>();
            if remainder < -1e-12 {
                return Err(bad("prompt too short for the calibrated attention profile"));
            }

            let local: Vec<usize> = if in_question {
                (q0.saturating_sub(2)..q0).filter(|&p| !is_boundary(p)).collect()
            } else {
                [t, t - 1, t - 2].into_iter().filter(|&p| !is_boundary(p)).collect()
            };
            let heads = (0..cfg.n_heads)
                .map(|h| {
                    let mut row = shared.clone();
                    let weights: Vec<f64> = if in_question {
                        vec![1.0; local.len()]
                    } else {
                        let split = LOCAL_SPLITS[h % LOCAL_SPLITS.len()];
                        local.iter().map(|&p| split[t - p]).collect()
                    };
                    let total: f64 = weights.iter().sum();
                    if remainder > 0.0 {
                        if total > 0.0 {
                            for (&p, w) in local.iter().zip(&weights) {
                                *row.entry(pos(p)).or_insert(0.0) += remainder * w / total;
                            }
                        } else {
                            *row.entry(pos(t)).or_insert(0.0) += remainder;
                        }
                    }
                    row
                })
                .collect();
            rows.insert(t, heads);
        }
        Ok(rows)
    }
}

impl ModelAdapter for ToyAdapter {
    fn n_heads(&self) -> usize {
        self.config.n_heads
    }

    fn attention_normalized(&self) -> bool {
        true
    }

    fn begin(&mut self, item: &BenchItem) -> Result<()> {
        let rows = self.build_rows(item)?;
        self.current = Some(Prepared {
            item: item.clone(),
            rows,
        });
        Ok(())
    }

    fn prefill_attention(
        &mut self,
        queries: Range<usize>,
        cache: &CacheView,
    ) -> Result<Vec<AttentionEvent>> {
        let prep = self.prepared()?;
        let mut events = Vec::new();
        for (&t, heads) in prep.rows.range(queries) {
            let query = LogicalPosition::from(t);
            let heads = heads
                .iter()
                .enumerate()
                .map(|(h, row)| {
                    let masked = cache.mask_row(h, row, true);
                    if masked.is_empty() && cache.visible(h, query) {
                        [(query, 1.0)].into_iter().collect()
                    } else {
                        masked
                    }
                })
                .collect();
            events.push(AttentionEvent {
                step: t as u64,
                kind: EventKind::Prefill,
                n_visible: cache.visible_upto(query),
                normalized: true,
                heads,
            });
        }
        Ok(events)
    }

    fn decode_step(&mut self, position: usize, cache: &CacheView) -> Result<DecodeOutput> {
        let cfg = self.config;
        let prep = self.prepared()?;
        let item = &prep.item;
        let regions = &item.regions;
        let cached = |i: usize| cache.contains(LogicalPosition::from(i));

        let mut missing = usize::from(!cached(0));
        if !regions.instruction.iter().any(|&i| cached(i)) {
            missing += 1;
        }
        missing += regions.question.iter().filter(|&&i| !cached(i)).count();
        missing += regions.answer.iter().filter(|&&i| !cached(i)).count();
        let intact = missing == 0 && !regions.answer.is_empty();

        let emitted = position.checked_sub(item.prompt.len()).ok_or_else(|| {
            Error::Adapter(format!("decode position {position} inside the prompt"))
        })?;
        let (token, logprob) = if intact {
            let token = regions.answer.get(emitted).map(|&a| item.prompt[a].clone());
            (token, cfg.answer_logprob)
        } else {
            let word = FILLER_LOOP[emitted % FILLER_LOOP.len()].to_string();
            (Some(word), -(1.0 + 0.25 * missing.max(1) as f64))
        };

        let mut row: BTreeMap<LogicalPosition, f64> = BTreeMap::new();
        row.insert(LogicalPosition(0), 0.25);
        for &a in &regions.answer {
            *row.entry(LogicalPosition::from(a)).or_insert(0.0) +=
                cfg.needle_decode / regions.answer.len() as f64;
        }
        for back in 1..=2 {
            if let Some(p) = position.checked_sub(back) {
                *row.entry(LogicalPosition::from(p)).or_insert(0.0) += 0.15;
            }
        }
        let total: f64 = row.values().sum();
        row.values_mut().for_each(|w| *w /= total);
        let heads = (0..cfg.n_heads)
            .map(|h| {
                let masked = cache.mask_row(h, &row, true);
                if masked.is_empty() {
                    let fallback = cache
                        .positions()
                        .rev()
                        .find(|&p| cache.visible(h, p))
                        .or_else(|| cache.positions().next_back())
                        .unwrap_or(LogicalPosition(0));
                    [(fallback, 1.0)].into_iter().collect()
                } else {
                    masked
                }
            })
            .collect();
        Ok(DecodeOutput {
            token,
            logprob,
            event: AttentionEvent {
                step: position as u64,
                kind: EventKind::Decode,
                n_visible: cache.len(),
                normalized: true,
                heads,
            },
        })
    }
}
