//! The KV-cache state machine.
//!
//! A [`CacheState`] tracks which logical positions are cached and, for each
//! cached position and KV head, the attention statistics every policy scores
//! from. Positions enter through [`CacheState::admit`], accumulate attention
//! through [`CacheState::apply_event`] and leave permanently through
//! [`CacheState::evict`], which refuses to touch anything in the
//! [`ProtectedSet`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token index in the concatenated prompt + generation sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogicalPosition(pub u32);

impl LogicalPosition {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for LogicalPosition {
    fn from(i: usize) -> Self {
        LogicalPosition(u32::try_from(i).expect("position index exceeds u32"))
    }
}

impl fmt::Display for LogicalPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Attention statistics of one (head, position) cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadScores {
    pub cumulative: f64,
    pub max_step: f64,
    pub current: f64,
    pub frequency: u64,
}

/// Per-position accounting: timestamps plus one [`HeadScores`] per KV head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub admitted_at: u64,
    pub last_access: u64,
    pub heads: Vec<HeadScores>,
}

impl ScoreRow {
    pub fn sum_cumulative(&self) -> f64 {
        self.heads.iter().map(|h| h.cumulative).sum()
    }

    pub fn sum_current(&self) -> f64 {
        self.heads.iter().map(|h| h.current).sum()
    }

    pub fn sum_max_step(&self) -> f64 {
        self.heads.iter().map(|h| h.max_step).sum()
    }

    pub fn total_frequency(&self) -> u64 {
        self.heads.iter().map(|h| h.frequency).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Prefill,
    Decode,
}

/// One step of layer-averaged attention, one sparse row per KV head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionEvent {
    /// Logical timestamp: the index of the querying (prefill) or generated
    /// (decode) token.
    pub step: u64,
    pub kind: EventKind,
    /// Number of positions the query could attend to at this step.
    pub n_visible: usize,
    /// Whether every non-empty row sums to one.
    pub normalized: bool,
    pub heads: Vec<BTreeMap<LogicalPosition, f64>>,
}

impl AttentionEvent {
    /// Head-averaged weight per position.
    pub fn mean_weights(&self) -> BTreeMap<LogicalPosition, f64> {
        let k = self.heads.len().max(1) as f64;
        let mut out = BTreeMap::new();
        for row in &self.heads {
            for (&p, &w) in row {
                *out.entry(p).or_insert(0.0) += w / k;
            }
        }
        out
    }
}

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// The cache itself. Single writer; `Send` so item runs can fan out.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheState {
    capacity: usize,
    n_heads: usize,
    rows: BTreeMap<LogicalPosition, ScoreRow>,
    step_clock: u64,
    admitted: usize,
    prefill_len: Option<usize>,
    prefill_positions: Option<Vec<LogicalPosition>>,
    frozen: Option<BTreeMap<LogicalPosition, Vec<f64>>>,
    high_water: Option<LogicalPosition>,
    invocations: u64,
}

impl CacheState {
    pub fn new(capacity: usize, n_heads: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("capacity must be positive".into()));
        }
        if n_heads == 0 {
            return Err(Error::Config("n_kv_heads must be positive".into()));
        }
        Ok(Self {
            capacity,
            n_heads,
            rows: BTreeMap::new(),
            step_clock: 0,
            admitted: 0,
            prefill_len: None,
            prefill_positions: None,
            frozen: None,
            high_water: None,
            invocations: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Cached positions in ascending index order.
    pub fn positions(&self) -> impl DoubleEndedIterator<Item = LogicalPosition> + '_ {
        self.rows.keys().copied()
    }

    pub fn position_set(&self) -> BTreeSet<LogicalPosition> {
        self.rows.keys().copied().collect()
    }

    pub fn contains(&self, p: LogicalPosition) -> bool {
        self.rows.contains_key(&p)
    }

    pub fn row(&self, p: LogicalPosition) -> Option<&ScoreRow> {
        self.rows.get(&p)
    }

    pub fn rows(&self) -> impl Iterator<Item = (LogicalPosition, &ScoreRow)> {
        self.rows.iter().map(|(p, r)| (*p, r))
    }

    pub fn step_clock(&self) -> u64 {
        self.step_clock
    }

    /// Number of positions admitted before [`CacheState::finish_prefill`].
    pub fn prefill_len(&self) -> Option<usize> {
        self.prefill_len
    }

    /// Positions cached at the moment prefill finished.
    pub fn prefill_positions(&self) -> Option<&[LogicalPosition]> {
        self.prefill_positions.as_deref()
    }

    pub fn frozen_scores(&self, p: LogicalPosition) -> Option<&[f64]> {
        self.frozen.as_ref()?.get(&p).map(Vec::as_slice)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    /// Number of completed eviction invocations.
    pub fn invocations(&self) -> u64 {
        self.invocations
    }

    /// Positions above capacity.
    pub fn overflow(&self) -> usize {
        self.rows.len().saturating_sub(self.capacity)
    }

    pub fn last_admitted(&self) -> Option<LogicalPosition> {
        self.high_water
    }

    /// Admit new positions at the current step. Indices must be strictly
    /// increasing and above every position ever admitted.
    pub fn admit(&mut self, new_positions: &[LogicalPosition]) -> Result<()> {
        let mut last = self.high_water;
        for &p in new_positions {
            if let Some(l) = last {
                if p <= l {
                    return Err(Error::NonMonotonicAdmission { new: p, last: l });
                }
            }
            last = Some(p);
        }
        for &p in new_positions {
            self.rows.insert(
                p,
                ScoreRow {
                    admitted_at: self.step_clock,
                    last_access: self.step_clock,
                    heads: vec![HeadScores::default(); self.n_heads],
                },
            );
        }
        self.high_water = last;
        self.admitted += new_positions.len();
        Ok(())
    }

    /// Accumulate one attention event. The whole event is rejected, leaving
    /// the state untouched, if it references an uncached position or carries
    /// an invalid weight.
    pub fn apply_event(&mut self, event: &AttentionEvent) -> Result<()> {
        let malformed = |reason: String| Error::MalformedEvent {
            step: event.step,
            reason,
        };
        if event.heads.len() != self.n_heads {
            return Err(malformed(format!(
                "expected {} head rows, got {}",
                self.n_heads,
                event.heads.len()
            )));
        }
        for (h, row) in event.heads.iter().enumerate() {
            let mut sum = 0.0;
            for (&p, &w) in row {
                if !self.rows.contains_key(&p) {
                    return Err(malformed(format!("head {h} references uncached {p}")));
                }
                if !w.is_finite() || w < 0.0 {
                    return Err(malformed(format!("head {h} weight {w} on {p}")));
                }
                sum += w;
            }
            if event.normalized && !row.is_empty() && (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(malformed(format!("head {h} row sums to {sum}")));
            }
        }

        for row in self.rows.values_mut() {
            for head in &mut row.heads {
                head.current = 0.0;
            }
        }
        self.step_clock = self.step_clock.max(event.step);
        for (h, weights) in event.heads.iter().enumerate() {
            for (p, &w) in weights {
                let row = self.rows.get_mut(p).expect("validated above");
                let cell = &mut row.heads[h];
                cell.cumulative += w;
                cell.max_step = cell.max_step.max(w);
                cell.current = w;
                if w > 0.0 {
                    cell.frequency += 1;
                    row.last_access = event.step;
                }
            }
        }
        Ok(())
    }

    /// Move the logical clock forward without attention (e.g. before
    /// admitting a token that no event has stamped yet).
    pub fn advance_clock(&mut self, step: u64) {
        self.step_clock = self.step_clock.max(step);
    }

    /// Mark the end of prefill: fixes `prefill_len`, snapshots the cached
    /// positions and freezes per-head cumulative scores.
    pub fn finish_prefill(&mut self) -> Result<()> {
        if self.prefill_len.is_some() {
            return Err(Error::Config("prefill already finished".into()));
        }
        self.prefill_len = Some(self.admitted);
        self.prefill_positions = Some(self.rows.keys().copied().collect());
        self.frozen = Some(
            self.rows
                .iter()
                .map(|(p, r)| (*p, r.heads.iter().map(|h| h.cumulative).collect()))
                .collect(),
        );
        Ok(())
    }

    /// Permanently remove `victims`. Fails without mutating anything if a
    /// victim is protected, not cached, or listed twice.
    pub fn evict(&mut self, victims: &[LogicalPosition], protected: &ProtectedSet) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &v in victims {
            if protected.contains(v) {
                return Err(Error::ProtectedVictim(v));
            }
            if !self.rows.contains_key(&v) || !seen.insert(v) {
                return Err(Error::NotCached(v));
            }
        }
        for v in victims {
            self.rows.remove(v);
        }
        self.invocations += 1;
        Ok(())
    }
}

// ── Structural protection ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtectionMode {
    None,
    PrefixOnly,
    SuffixOnly,
    Bilateral,
}

impl ProtectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtectionMode::None => "none",
            ProtectionMode::PrefixOnly => "prefix_only",
            ProtectionMode::SuffixOnly => "suffix_only",
            ProtectionMode::Bilateral => "bilateral",
        }
    }

    fn prefix_active(self) -> bool {
        matches!(self, ProtectionMode::PrefixOnly | ProtectionMode::Bilateral)
    }

    fn suffix_active(self) -> bool {
        matches!(self, ProtectionMode::SuffixOnly | ProtectionMode::Bilateral)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuffixMode {
    /// Highest-indexed cached positions at each invocation.
    Dynamic,
    /// Highest-indexed positions at the end of prefill, fixed thereafter.
    Static,
}

impl SuffixMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SuffixMode::Dynamic => "dynamic",
            SuffixMode::Static => "static",
        }
    }
}

/// Bilateral guard parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtectionConfig {
    pub mode: ProtectionMode,
    pub rho_prefix: f64,
    pub rho_suffix: f64,
    pub min_slots: usize,
    pub suffix_mode: SuffixMode,
}

pub const DEFAULT_MIN_SLOTS: usize = 4;

impl ProtectionConfig {
    fn with(mode: ProtectionMode, rho_prefix: f64, rho_suffix: f64) -> Self {
        Self {
            mode,
            rho_prefix,
            rho_suffix,
            min_slots: DEFAULT_MIN_SLOTS,
            suffix_mode: SuffixMode::Dynamic,
        }
    }

    pub fn none() -> Self {
        Self::with(ProtectionMode::None, 0.0, 0.0)
    }

    pub fn bilateral(rho: f64) -> Self {
        Self::with(ProtectionMode::Bilateral, rho, rho)
    }

    pub fn prefix_only(rho: f64) -> Self {
        Self::with(ProtectionMode::PrefixOnly, rho, 0.0)
    }

    pub fn suffix_only(rho: f64) -> Self {
        Self::with(ProtectionMode::SuffixOnly, 0.0, rho)
    }

    pub fn with_suffix_mode(mut self, suffix_mode: SuffixMode) -> Self {
        self.suffix_mode = suffix_mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, rho) in [("rho_prefix", self.rho_prefix), ("rho_suffix", self.rho_suffix)] {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Config(format!("{name} = {rho} is outside [0, 1]")));
            }
        }
        if self.min_slots == 0 {
            return Err(Error::Config("min_slots must be positive".into()));
        }
        Ok(())
    }

    /// The fraction reported for this config (the active side's ρ).
    pub fn rho(&self) -> f64 {
        match self.mode {
            ProtectionMode::None => 0.0,
            ProtectionMode::SuffixOnly => self.rho_suffix,
            _ => self.rho_prefix,
        }
    }

    /// Realized prefix guard size for capacity `c`.
    pub fn prefix_slots(&self, capacity: usize) -> usize {
        if self.mode.prefix_active() {
            side_slots(self.rho_prefix, capacity, self.min_slots)
        } else {
            0
        }
    }

    /// Realized suffix guard size for capacity `c`.
    pub fn suffix_slots(&self, capacity: usize) -> usize {
        if self.mode.suffix_active() {
            side_slots(self.rho_suffix, capacity, self.min_slots)
        } else {
            0
        }
    }
}

fn side_slots(rho: f64, capacity: usize, min_slots: usize) -> usize {
    // Products like 0.15 * 100 land a hair above the integer.
    let raw = (rho * capacity as f64 - 1e-9).ceil().max(0.0) as usize;
    raw.max(min_slots)
}

impl fmt::Display for ProtectionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            ProtectionMode::None => write!(f, "none")?,
            ProtectionMode::PrefixOnly => write!(f, "prefix:{}", self.rho_prefix)?,
            ProtectionMode::SuffixOnly => write!(f, "suffix:{}", self.rho_suffix)?,
            ProtectionMode::Bilateral if self.rho_prefix == self.rho_suffix => {
                write!(f, "bilateral:{}", self.rho_prefix)?
            }
            ProtectionMode::Bilateral => {
                write!(f, "bilateral:{}/{}", self.rho_prefix, self.rho_suffix)?
            }
        }
        if self.suffix_mode == SuffixMode::Static && self.mode.suffix_active() {
            write!(f, ":static")?;
        }
        Ok(())
    }
}

impl FromStr for ProtectionConfig {
    type Err = Error;

    /// `none`, `prefix:0.1`, `suffix:0.1`, `bilateral:0.1`,
    /// `bilateral:0.1/0.05`, each optionally followed by `:static`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognized protection spec `{s}`"));
        let mut parts = s.trim().split(':');
        let mode = parts.next().ok_or_else(bad)?;
        if mode == "none" {
            return if parts.next().is_none() { Ok(Self::none()) } else { Err(bad()) };
        }
        let rho_text = parts.next().ok_or_else(bad)?;
        let parse = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        let mut cfg = match mode {
            "prefix" | "prefix_only" => Self::prefix_only(parse(rho_text)?),
            "suffix" | "suffix_only" => Self::suffix_only(parse(rho_text)?),
            "bilateral" => match rho_text.split_once('/') {
                Some((a, b)) => {
                    Self::with(ProtectionMode::Bilateral, parse(a)?, parse(b)?)
                }
                None => Self::bilateral(parse(rho_text)?),
            },
            _ => return Err(bad()),
        };
        match parts.next() {
            None | Some("dynamic") => {}
            Some("static") => cfg.suffix_mode = SuffixMode::Static,
            Some(_) => return Err(bad()),
        }
        if parts.next().is_some() {
            return Err(bad());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The realized, non-evictable positions at one invocation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProtectedSet {
    pub prefix: BTreeSet<LogicalPosition>,
    pub suffix: BTreeSet<LogicalPosition>,
}

impl ProtectedSet {
    pub fn contains(&self, p: LogicalPosition) -> bool {
        self.prefix.contains(&p) || self.suffix.contains(&p)
    }

    pub fn len(&self) -> usize {
        self.prefix.len() + self.suffix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefix.is_empty() && self.suffix.is_empty()
    }

    pub fn all(&self) -> BTreeSet<LogicalPosition> {
        self.prefix.union(&self.suffix).copied().collect()
    }
}

/// Realize the guard for the current cache contents.
///
/// The prefix guard takes the lowest-indexed cached positions. The suffix
/// guard takes the highest-indexed ones (dynamic), or the highest-indexed
/// positions at the end of prefill that are still cached (static; before
/// prefill ends it tracks the current tail). When the cache is too small for
/// both, the prefix keeps its slots.
pub fn compute_protected_set(config: &ProtectionConfig, state: &CacheState) -> ProtectedSet {
    let capacity = state.capacity();
    let n = state.len();
    let prefix_n = config.prefix_slots(capacity).min(n);
    let prefix: BTreeSet<_> = state.positions().take(prefix_n).collect();
    let suffix_n = config.suffix_slots(capacity).min(n - prefix_n);
    if suffix_n == 0 {
        return ProtectedSet {
            prefix,
            suffix: BTreeSet::new(),
        };
    }
    let suffix = match (config.suffix_mode, state.prefill_positions()) {
        (SuffixMode::Static, Some(snapshot)) => snapshot
            .iter()
            .rev()
            .take(config.suffix_slots(capacity))
            .copied()
            .filter(|p| state.contains(*p) && !prefix.contains(p))
            .take(suffix_n)
            .collect(),
        _ => state
            .positions()
            .rev()
            .filter(|p| !prefix.contains(p))
            .take(suffix_n)
            .collect(),
    };
    ProtectedSet { prefix, suffix }
}
