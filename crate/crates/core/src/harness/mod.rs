//! Full runs: prefill, compression to capacity, τ-spaced decode eviction and
//! the chunked-prefill alternative, driven through a [`ModelAdapter`].

mod niah;
mod replay;
mod runner;
mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::{AttentionEvent, CacheState, LogicalPosition};
use crate::credit::CreditConfig;
use crate::error::{Error, Result};
use crate::metrics::BoundarySpec;
use crate::policy::PolicySpec;

pub use niah::{gen_niah, NeedlePosition, NiahItem, DEFAULT_INSTRUCTION, DEFAULT_QUESTION};
pub use replay::ReplayAdapter;
pub use runner::{
    capture_trace, replay_final_cache, run_decode_regime, run_item, run_prefill_regime,
    EvictionRecord, RunRecord,
};
pub use toy::{Referral, ToyAdapter, ToyConfig, FILLER_LOOP};

// ── Items ───────────────────────────────────────────────────────────────────

/// Structural regions of a prompt, as prompt indices. Position 0 is the
/// attention sink.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRegions {
    pub instruction: Vec<usize>,
    pub question: Vec<usize>,
    /// Positions carrying the answer; empty when the answer is not in the
    /// prompt (e.g. truncated away).
    pub answer: Vec<usize>,
}

/// One benchmark item as the harness sees it: whitespace tokens plus the
/// declared structural regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchItem {
    pub id: String,
    pub prompt: Vec<String>,
    pub references: Vec<String>,
    pub regions: PromptRegions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub needle_position: Option<NeedlePosition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

impl BenchItem {
    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    /// Sink plus instruction as the prefix region; instruction and question
    /// as boundary positions.
    pub fn boundary_spec(&self) -> BoundarySpec {
        let to_pos = |v: &[usize]| v.iter().map(|&i| LogicalPosition::from(i)).collect::<Vec<_>>();
        let mut prefix = vec![LogicalPosition(0)];
        prefix.extend(to_pos(&self.regions.instruction));
        let mut boundary = to_pos(&self.regions.instruction);
        boundary.extend(to_pos(&self.regions.question));
        BoundarySpec {
            prefix_region: prefix,
            boundary_positions: boundary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.prompt.len();
        let regions = &self.regions;
        let all = regions
            .instruction
            .iter()
            .chain(&regions.question)
            .chain(&regions.answer);
        if let Some(bad) = all.clone().find(|&&i| i >= len || i == 0) {
            return Err(Error::InvalidInput(format!(
                "item {}: region index {bad} outside 1..{len}",
                self.id
            )));
        }
        if self.references.is_empty() {
            return Err(Error::InvalidInput(format!("item {}: no references", self.id)));
        }
        Ok(())
    }
}

// ── Regime ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Decode,
    PrefillChunked,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Decode => "decode",
            Regime::PrefillChunked => "prefill_chunked",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "decode" => Ok(Regime::Decode),
            "prefill_chunked" | "prefill" | "chunked" => Ok(Regime::PrefillChunked),
            other => Err(Error::Config(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub capacity: usize,
    pub tau: usize,
    pub max_new_tokens: usize,
    pub prompt_token_cap: usize,
    pub chunk_size: Option<usize>,
}

impl RegimeConfig {
    pub fn decode(capacity: usize) -> Self {
        Self {
            regime: Regime::Decode,
            capacity,
            tau: 8,
            max_new_tokens: 128,
            prompt_token_cap: 1920,
            chunk_size: None,
        }
    }

    pub fn prefill_chunked(capacity: usize, chunk_size: usize) -> Self {
        Self {
            regime: Regime::PrefillChunked,
            chunk_size: Some(chunk_size),
            ..Self::decode(capacity)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::Config("capacity must be positive".into()));
        }
        if self.tau == 0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.regime == Regime::PrefillChunked && !matches!(self.chunk_size, Some(c) if c > 0) {
            return Err(Error::Config("prefill_chunked needs a positive chunk_size".into()));
        }
        Ok(())
    }
}

/// Capacity as configured: absolute, a fraction of each prompt, or large
/// enough that nothing is ever evicted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CapacitySpec {
    Absolute(usize),
    Fraction(f64),
    Full,
}

impl CapacitySpec {
    pub fn resolve(&self, prompt_len: usize, max_new_tokens: usize) -> usize {
        match *self {
            CapacitySpec::Absolute(c) => c,
            CapacitySpec::Fraction(f) => ((f * prompt_len as f64).round() as usize).max(1),
            CapacitySpec::Full => prompt_len + max_new_tokens,
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, CapacitySpec::Full)
    }
}

impl fmt::Display for CapacitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CapacitySpec::Absolute(c) => write!(f, "{c}"),
            CapacitySpec::Fraction(x) => write!(f, "{}%", x * 100.0),
            CapacitySpec::Full => write!(f, "full"),
        }
    }
}

impl FromStr for CapacitySpec {
    type Err = Error;

    /// `256`, `13%` or `full`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("invalid capacity `{s}`"));
        if s == "full" {
            return Ok(CapacitySpec::Full);
        }
        if let Some(pct) = s.strip_suffix('%') {
            let x: f64 = pct.trim().parse().map_err(|_| bad())?;
            if !(x > 0.0 && x <= 100.0) {
                return Err(bad());
            }
            return Ok(CapacitySpec::Fraction(x / 100.0));
        }
        match s.parse::<usize>() {
            Ok(c) if c > 0 => Ok(CapacitySpec::Absolute(c)),
            _ => Err(bad()),
        }
    }
}

// ── Strategy ────────────────────────────────────────────────────────────────

/// What chooses victims: a stateless policy, or LRU blended with the online
/// credit estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    Policy(PolicySpec),
    Credit(CreditConfig),
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::Policy(p) => p.id.to_string(),
            Strategy::Credit(_) => "credit".into(),
        }
    }

    pub fn variant(&self) -> &'static str {
        match self {
            Strategy::Policy(p) => p.variant.as_str(),
            Strategy::Credit(_) => "simplified",
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            Strategy::Policy(p) => Strategy::Policy(p.with_seed(seed)),
            other => other,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Policy(p) => write!(f, "{p}"),
            Strategy::Credit(_) => write!(f, "credit"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("credit") {
            Ok(Strategy::Credit(CreditConfig::default()))
        } else {
            Ok(Strategy::Policy(s.parse()?))
        }
    }
}

// ── Adapter contract ────────────────────────────────────────────────────────

/// What an adapter may see of the cache: the cached positions, minus any
/// positions a per-head policy has masked out for a given head.
#[derive(Debug, Clone, Copy)]
pub struct CacheView<'a> {
    state: &'a CacheState,
    hidden: &'a [BTreeSet<LogicalPosition>],
}

impl<'a> CacheView<'a> {
    pub fn new(state: &'a CacheState, hidden: &'a [BTreeSet<LogicalPosition>]) -> Self {
        Self { state, hidden }
    }

    pub fn contains(&self, p: LogicalPosition) -> bool {
        self.state.contains(p)
    }

    /// Whether head `h` can attend to `p`.
    pub fn visible(&self, h: usize, p: LogicalPosition) -> bool {
        self.state.contains(p) && self.hidden.get(h).is_none_or(|m| !m.contains(&p))
    }

    pub fn len(&self) -> usize {
        self.state.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state.is_empty()
    }

    pub fn positions(&self) -> impl DoubleEndedIterator<Item = LogicalPosition> + 'a {
        self.state.positions()
    }

    /// Count of cached positions at or below `p`.
    pub fn visible_upto(&self, p: LogicalPosition) -> usize {
        self.state.positions().take_while(|q| *q <= p).count()
    }

    /// Keep the entries of `row` head `h` can see; rescale to sum to one when
    /// `normalize` is set and anything survives.
    pub fn mask_row(
        &self,
        h: usize,
        row: &BTreeMap<LogicalPosition, f64>,
        normalize: bool,
    ) -> BTreeMap<LogicalPosition, f64> {
        let mut kept: BTreeMap<_, _> = row
            .iter()
            .filter(|(p, _)| self.visible(h, **p))
            .map(|(p, w)| (*p, *w))
            .collect();
        if normalize {
            let sum: f64 = kept.values().sum();
            if sum > 0.0 {
                kept.values_mut().for_each(|w| *w /= sum);
            }
        }
        kept
    }
}

/// Output of one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// `None` signals end of sequence.
    pub token: Option<String>,
    pub logprob: f64,
    pub event: AttentionEvent,
}

/// Boundary between the cache engine and a token generator.
///
/// Given identical cache contents and step, an adapter must return identical
/// outputs.
pub trait ModelAdapter: Send {
    fn n_heads(&self) -> usize;

    /// Whether emitted attention rows sum to one.
    fn attention_normalized(&self) -> bool;

    /// Reset for a new item.
    fn begin(&mut self, item: &BenchItem) -> Result<()>;

    /// Attention events of the prompt queries in `queries`, over what is
    /// currently cached.
    fn prefill_attention(
        &mut self,
        queries: Range<usize>,
        cache: &CacheView,
    ) -> Result<Vec<AttentionEvent>>;

    /// Produce the token at logical `position`.
    fn decode_step(&mut self, position: usize, cache: &CacheView) -> Result<DecodeOutput>;
}
