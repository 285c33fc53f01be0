//! Global per-position scores. Lower scores are evicted first.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PolicyId, PolicySpec, Variant};
use crate::cache::{CacheState, LogicalPosition, ProtectedSet, ScoreRow};
use crate::error::{Error, Result};
use crate::seed::mix;

/// Tie-bonus scale for simplified H2O; far below any attention quantum.
const RECENCY_BONUS: f64 = 1e-9;

/// Score every cached position.
///
/// SLW and faithful SnapKV assign `+inf` to positions they would keep
/// unconditionally (window members, positions admitted after prefill).
pub fn score_simplified(
    spec: &PolicySpec,
    state: &CacheState,
    protected: &ProtectedSet,
) -> Result<BTreeMap<LogicalPosition, f64>> {
    let per_row = |f: &dyn Fn(&ScoreRow) -> f64| -> BTreeMap<LogicalPosition, f64> {
        state.rows().map(|(p, r)| (p, f(r))).collect()
    };
    let faithful = spec.variant == Variant::Faithful;
    let scores = match spec.id {
        PolicyId::Lru => per_row(&|r| r.last_access as f64),
        PolicyId::H2o if spec.params.h2o_recency_bonus && !faithful => {
            let clock = (state.step_clock() + 1) as f64;
            per_row(&|r| r.sum_cumulative() + RECENCY_BONUS * r.last_access as f64 / clock)
        }
        PolicyId::H2o => per_row(&|r| r.sum_cumulative()),
        PolicyId::SnapKv if faithful => {
            if !state.is_frozen() {
                return Err(Error::PrefillNotFrozen("snapkv:faithful"));
            }
            state
                .positions()
                .map(|p| {
                    let s = state
                        .frozen_scores(p)
                        .map_or(f64::INFINITY, |h| h.iter().sum());
                    (p, s)
                })
                .collect()
        }
        PolicyId::SnapKv => {
            let alpha = spec.params.snap_alpha;
            per_row(&|r| r.heads.iter().map(|h| h.cumulative + alpha * h.current).sum())
        }
        PolicyId::AdaKv => per_row(&|r| r.heads.iter().map(|h| h.cumulative + 0.5 * h.max_step).sum()),
        PolicyId::Quest => per_row(&|r| r.sum_current()),
        PolicyId::Slw => slw_scores(spec, state, protected),
        PolicyId::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.params.rng_seed, state.invocations()));
            state.positions().map(|p| (p, rng.gen::<f64>())).collect()
        }
    };
    Ok(scores)
}

fn slw_scores(
    spec: &PolicySpec,
    state: &CacheState,
    protected: &ProtectedSet,
) -> BTreeMap<LogicalPosition, f64> {
    let n_sink = spec.params.n_sink;
    let window = spec.params.window.unwrap_or_else(|| {
        state
            .capacity()
            .saturating_sub(n_sink)
            .saturating_sub(protected.len())
    });
    // Lowest index still inside the recency window.
    let cutoff = match window {
        0 => None,
        w => state.positions().rev().take(w).last(),
    };
    state
        .positions()
        .map(|p| {
            let keep = p.index() < n_sink || cutoff.is_some_and(|c| p >= c);
            (p, if keep { f64::INFINITY } else { p.0 as f64 })
        })
        .collect()
}
