//! Victim selection.
//!
//! Every policy reduces to "evict the `k` unprotected positions with the
//! lowest score, lower index first on ties", except the faithful AdaKV and
//! QUEST variants, which let each KV head pick its own retained set under an
//! entropy-weighted budget and then trim the union back to the target size
//! (see [`faithful`]).

pub mod faithful;
mod score;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheState, LogicalPosition, ProtectedSet};
use crate::error::{Error, Result};

pub use score::score_simplified;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyId {
    Lru,
    H2o,
    SnapKv,
    Slw,
    AdaKv,
    Quest,
    Random,
}

impl PolicyId {
    pub const ALL: [PolicyId; 7] = [
        PolicyId::Lru,
        PolicyId::H2o,
        PolicyId::SnapKv,
        PolicyId::Slw,
        PolicyId::AdaKv,
        PolicyId::Quest,
        PolicyId::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyId::Lru => "lru",
            PolicyId::H2o => "h2o",
            PolicyId::SnapKv => "snapkv",
            PolicyId::Slw => "slw",
            PolicyId::AdaKv => "adakv",
            PolicyId::Quest => "quest",
            PolicyId::Random => "random",
        }
    }

    pub fn has_faithful(self) -> bool {
        matches!(
            self,
            PolicyId::H2o | PolicyId::SnapKv | PolicyId::AdaKv | PolicyId::Quest
        )
    }
}

impl FromStr for PolicyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyId::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Simplified,
    Faithful,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Simplified => "simplified",
            Variant::Faithful => "faithful",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// Weight on current-step attention in the SnapKV score.
    pub snap_alpha: f64,
    /// Attention-sink positions SLW never evicts.
    pub n_sink: usize,
    /// SLW recency window; `None` fills whatever capacity the sinks and the
    /// guard leave over.
    pub window: Option<usize>,
    pub rng_seed: u64,
    /// Simplified H2O only: break cumulative-mass ties toward recent access.
    pub h2o_recency_bonus: bool,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            snap_alpha: 0.5,
            n_sink: 4,
            window: None,
            rng_seed: 0,
            h2o_recency_bonus: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub id: PolicyId,
    pub variant: Variant,
    pub params: PolicyParams,
}

impl PolicySpec {
    pub fn simplified(id: PolicyId) -> Self {
        Self {
            id,
            variant: Variant::Simplified,
            params: PolicyParams::default(),
        }
    }

    pub fn faithful(id: PolicyId) -> Result<Self> {
        let spec = Self {
            variant: Variant::Faithful,
            ..Self::simplified(id)
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.params.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::Faithful && !self.id.has_faithful() {
            return Err(Error::Config(format!(
                "policy `{}` has no faithful variant",
                self.id
            )));
        }
        if !(self.params.snap_alpha.is_finite() && self.params.snap_alpha >= 0.0) {
            return Err(Error::Config("snap_alpha must be non-negative".into()));
        }
        if self.params.window == Some(0) {
            return Err(Error::Config("SLW window must be positive".into()));
        }
        Ok(())
    }

    /// Whether this spec ranks positions per head rather than globally.
    pub fn is_per_head(&self) -> bool {
        self.variant == Variant::Faithful && matches!(self.id, PolicyId::AdaKv | PolicyId::Quest)
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            Variant::Simplified => write!(f, "{}", self.id),
            Variant::Faithful => write!(f, "{}:faithful", self.id),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    /// `lru`, `h2o`, ..., optionally suffixed `:faithful` or `:simplified`.
    fn from_str(s: &str) -> Result<Self> {
        let (id, variant) = match s.trim().split_once(':') {
            Some((id, v)) => (id, Some(v)),
            None => (s.trim(), None),
        };
        let id: PolicyId = id.parse()?;
        match variant {
            None | Some("simplified") => Ok(Self::simplified(id)),
            Some("faithful") => Self::faithful(id),
            Some(v) => Err(Error::Config(format!("unknown policy variant `{v}`"))),
        }
    }
}

/// Result of one policy invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VictimSelection {
    /// In eviction order.
    pub victims: Vec<LogicalPosition>,
    /// Faithful per-head variants only: the positions each head kept.
    pub per_head_retention: Option<Vec<BTreeSet<LogicalPosition>>>,
}

/// Ascending by score, then by index.
pub(crate) fn eviction_order(a: (LogicalPosition, f64), b: (LogicalPosition, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

/// Positions a policy may choose from: cached, unprotected and, for SLW,
/// outside the sink.
pub fn candidates(
    spec: &PolicySpec,
    state: &CacheState,
    protected: &ProtectedSet,
) -> Vec<LogicalPosition> {
    state
        .positions()
        .filter(|p| !protected.contains(*p))
        .filter(|p| spec.id != PolicyId::Slw || p.index() >= spec.params.n_sink)
        .collect()
}

/// Pick `k` victims from the unprotected cached positions.
pub fn select_victims(
    spec: &PolicySpec,
    state: &CacheState,
    protected: &ProtectedSet,
    k: usize,
) -> Result<VictimSelection> {
    spec.validate()?;
    let pool = candidates(spec, state, protected);
    if k > pool.len() {
        return Err(Error::InsufficientCandidates {
            requested: k,
            available: pool.len(),
        });
    }
    if spec.is_per_head() {
        return faithful::select_faithful(spec, state, protected, &pool, k);
    }
    let scores = score_simplified(spec, state, protected)?;
    Ok(VictimSelection {
        victims: lowest_k(&pool, &scores, k),
        per_head_retention: None,
    })
}

pub(crate) fn lowest_k(
    pool: &[LogicalPosition],
    scores: &BTreeMap<LogicalPosition, f64>,
    k: usize,
) -> Vec<LogicalPosition> {
    let mut ranked: Vec<_> = pool.iter().map(|&p| (p, scores[&p])).collect();
    ranked.sort_by(|a, b| eviction_order(*a, *b));
    ranked.into_iter().take(k).map(|(p, _)| p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{AttentionEvent, EventKind};

    fn pos(i: u32) -> LogicalPosition {
        LogicalPosition(i)
    }

    fn state_with(n: u32, capacity: usize) -> CacheState {
        let mut s = CacheState::new(capacity, 1).unwrap();
        s.admit(&(0..n).map(pos).collect::<Vec<_>>()).unwrap();
        s
    }

    fn attend(s: &mut CacheState, step: u64, weights: &[(u32, f64)]) {
        s.apply_event(&AttentionEvent {
            step,
            kind: EventKind::Decode,
            n_visible: s.len(),
            normalized: false,
            heads: vec![weights.iter().map(|&(p, w)| (pos(p), w)).collect()],
        })
        .unwrap();
    }

    #[test]
    fn parse_policy_strings() {
        assert_eq!(
            "adakv:faithful".parse::<PolicySpec>().unwrap(),
            PolicySpec::faithful(PolicyId::AdaKv).unwrap()
        );
        assert_eq!(
            "LRU".parse::<PolicySpec>().unwrap(),
            PolicySpec::simplified(PolicyId::Lru)
        );
        assert!("slw:faithful".parse::<PolicySpec>().is_err());
        assert!("random:faithful".parse::<PolicySpec>().is_err());
        assert!("lru:faithful".parse::<PolicySpec>().is_err());
        assert!("pyramid".parse::<PolicySpec>().is_err());
        for id in PolicyId::ALL {
            let s = PolicySpec::simplified(id);
            assert_eq!(s.to_string().parse::<PolicySpec>().unwrap(), s);
        }
    }

    #[test]
    fn lru_orders_by_last_access() {
        let mut s = state_with(3, 8);
        attend(&mut s, 3, &[(0, 1.0)]);
        attend(&mut s, 5, &[(2, 1.0)]);
        attend(&mut s, 7, &[(1, 1.0)]);
        let sel = select_victims(
            &PolicySpec::simplified(PolicyId::Lru),
            &s,
            &ProtectedSet::default(),
            3,
        )
        .unwrap();
        assert_eq!(sel.victims, vec![pos(0), pos(2), pos(1)]);
    }

    #[test]
    fn h2o_evicts_lightest() {
        let mut s = state_with(3, 8);
        attend(&mut s, 1, &[(0, 1.2), (1, 0.8), (2, 0.1)]);
        let sel = select_victims(
            &PolicySpec::simplified(PolicyId::H2o),
            &s,
            &ProtectedSet::default(),
            1,
        )
        .unwrap();
        assert_eq!(sel.victims, vec![pos(2)]);
    }

    #[test]
    fn adakv_simplified_adds_half_max() {
        // cumulative {1.0, 1.0}, max {0.8, 0.2}
        let mut s = state_with(2, 8);
        attend(&mut s, 1, &[(0, 0.8), (1, 0.2)]);
        attend(&mut s, 2, &[(0, 0.2), (1, 0.2)]);
        attend(&mut s, 3, &[(1, 0.2)]);
        attend(&mut s, 4, &[(1, 0.2)]);
        attend(&mut s, 5, &[(1, 0.2)]);
        let spec = PolicySpec::simplified(PolicyId::AdaKv);
        let scores = score_simplified(&spec, &s, &ProtectedSet::default()).unwrap();
        assert!((scores[&pos(0)] - 1.4).abs() < 1e-12);
        assert!((scores[&pos(1)] - 1.1).abs() < 1e-12);
        let sel = select_victims(&spec, &s, &ProtectedSet::default(), 1).unwrap();
        assert_eq!(sel.victims, vec![pos(1)]);
    }

    #[test]
    fn ties_evict_lower_index() {
        let s = state_with(5, 8);
        let sel = select_victims(
            &PolicySpec::simplified(PolicyId::H2o),
            &s,
            &ProtectedSet::default(),
            2,
        )
        .unwrap();
        assert_eq!(sel.victims, vec![pos(0), pos(1)]);
    }

    #[test]
    fn all_protected_is_an_error() {
        let s = state_with(3, 8);
        let protected = ProtectedSet {
            prefix: s.position_set(),
            suffix: Default::default(),
        };
        let err = select_victims(&PolicySpec::simplified(PolicyId::Lru), &s, &protected, 1);
        assert_eq!(
            err,
            Err(Error::InsufficientCandidates {
                requested: 1,
                available: 0
            })
        );
    }

    #[test]
    fn random_is_seeded() {
        let s = state_with(30, 8);
        let spec = PolicySpec::simplified(PolicyId::Random).with_seed(42);
        let a = select_victims(&spec, &s, &ProtectedSet::default(), 10).unwrap();
        let b = select_victims(&spec, &s, &ProtectedSet::default(), 10).unwrap();
        assert_eq!(a, b);
        let c = select_victims(&spec.with_seed(43), &s, &ProtectedSet::default(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn slw_keeps_sinks_and_window() {
        let s = state_with(20, 10);
        let spec = PolicySpec::simplified(PolicyId::Slw);
        let sel = select_victims(&spec, &s, &ProtectedSet::default(), 10).unwrap();
        // window = 10 - 4 = 6 keeps 14..19; sinks keep 0..3.
        assert_eq!(sel.victims, (4..14).map(pos).collect::<Vec<_>>());
        assert!(select_victims(&spec, &s, &ProtectedSet::default(), 17).is_err());
    }

    #[test]
    fn snapkv_faithful_needs_freeze() {
        let s = state_with(4, 8);
        let spec = PolicySpec::faithful(PolicyId::SnapKv).unwrap();
        assert_eq!(
            select_victims(&spec, &s, &ProtectedSet::default(), 1),
            Err(Error::PrefillNotFrozen("snapkv:faithful"))
        );
    }

    #[test]
    fn snapkv_faithful_ignores_decode_attention() {
        let mut s = state_with(3, 8);
        attend(&mut s, 1, &[(0, 0.5), (1, 0.3), (2, 0.2)]);
        s.finish_prefill().unwrap();
        attend(&mut s, 2, &[(2, 1.0)]);
        attend(&mut s, 3, &[(2, 1.0)]);
        s.admit(&[pos(3)]).unwrap();
        let spec = PolicySpec::faithful(PolicyId::SnapKv).unwrap();
        let sel = select_victims(&spec, &s, &ProtectedSet::default(), 2).unwrap();
        assert_eq!(sel.victims, vec![pos(2), pos(1)]);
        let simple = PolicySpec::simplified(PolicyId::SnapKv);
        let sel = select_victims(&simple, &s, &ProtectedSet::default(), 1).unwrap();
        assert_eq!(sel.victims, vec![pos(3)]);
    }
}
