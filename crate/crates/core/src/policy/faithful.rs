//! Per-head selection for faithful AdaKV and QUEST.
//!
//! Each head gets a budget inversely proportional to the entropy of its
//! attention distribution, keeps its own top positions, and the union of all
//! heads' choices is trimmed back to the target size by head consensus. If
//! the union falls short of the target, the remaining slots go to the best
//! aggregate scores so the cache always lands on exactly the target size.

use std::collections::{BTreeMap, BTreeSet};

use super::{eviction_order, PolicyId, PolicySpec, VictimSelection};
use crate::cache::{CacheState, HeadScores, LogicalPosition, ProtectedSet};
use crate::error::{Error, Result};

pub const ENTROPY_EPS: f64 = 1e-6;

/// Per-head signal for the faithful variants.
fn head_score(id: PolicyId, cell: &HeadScores) -> f64 {
    match id {
        PolicyId::Quest => cell.current,
        _ => cell.cumulative + 0.5 * cell.max_step,
    }
}

/// Shannon entropy (nats) of each head's attention distribution over the
/// cached positions: cumulative mass for AdaKV, current-step mass for QUEST.
/// A head with no mass counts as uniform.
pub fn head_entropies(id: PolicyId, state: &CacheState) -> Vec<f64> {
    (0..state.n_heads())
        .map(|h| {
            let mass: Vec<f64> = state
                .rows()
                .map(|(_, r)| match id {
                    PolicyId::Quest => r.heads[h].current,
                    _ => r.heads[h].cumulative,
                })
                .collect();
            let total: f64 = mass.iter().sum();
            let entropy = if total > 0.0 {
                -mass
                    .iter()
                    .filter(|&&m| m > 0.0)
                    .map(|&m| {
                        let q = m / total;
                        q * q.ln()
                    })
                    .sum::<f64>()
            } else {
                (mass.len().max(1) as f64).ln()
            };
            entropy.max(ENTROPY_EPS)
        })
        .collect()
}

/// Split `total_budget` across heads in proportion to 1/entropy, rounding by
/// largest remainder (lower head index wins remainder ties).
pub fn allocate_per_head_budgets(entropies: &[f64], total_budget: usize) -> Result<Vec<usize>> {
    if entropies.is_empty() {
        return Err(Error::InvalidInput("no heads to allocate".into()));
    }
    if entropies.iter().any(|e| e.is_nan() || *e < 0.0) {
        return Err(Error::InvalidInput(format!(
            "entropies must be non-negative: {entropies:?}"
        )));
    }
    let inv: Vec<f64> = entropies.iter().map(|e| 1.0 / e.max(ENTROPY_EPS)).collect();
    let sum: f64 = inv.iter().sum();
    let shares: Vec<f64> = inv.iter().map(|w| total_budget as f64 * w / sum).collect();
    let mut budgets: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    // Floating error can push a floor one past the exact quota.
    while budgets.iter().sum::<usize>() > total_budget {
        let h = (0..budgets.len())
            .max_by(|&a, &b| (budgets[a] as f64 - shares[a]).total_cmp(&(budgets[b] as f64 - shares[b])))
            .expect("non-empty");
        budgets[h] -= 1;
    }
    let left = total_budget - budgets.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..budgets.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - budgets[a] as f64;
        let fb = shares[b] - budgets[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &h in order.iter().take(left) {
        budgets[h] += 1;
    }
    Ok(budgets)
}

/// Each head keeps the protected positions plus its top-`budgets[h]`
/// unprotected positions by its own score. Returns the per-head sets and
/// their union.
pub fn select_per_head(
    spec: &PolicySpec,
    state: &CacheState,
    budgets: &[usize],
    protected: &ProtectedSet,
) -> Result<(Vec<BTreeSet<LogicalPosition>>, BTreeSet<LogicalPosition>)> {
    if !spec.is_per_head() {
        return Err(Error::Config(format!("{spec} does not select per head")));
    }
    if budgets.len() != state.n_heads() {
        return Err(Error::InvalidInput(format!(
            "{} budgets for {} heads",
            budgets.len(),
            state.n_heads()
        )));
    }
    let kept_protected: BTreeSet<_> = state.positions().filter(|p| protected.contains(*p)).collect();
    let mut heads = Vec::with_capacity(budgets.len());
    for (h, &b) in budgets.iter().enumerate() {
        let mut ranked: Vec<_> = state
            .rows()
            .filter(|(p, _)| !protected.contains(*p))
            .map(|(p, r)| (p, head_score(spec.id, &r.heads[h])))
            .collect();
        // Best first, lower index on ties.
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut kept = kept_protected.clone();
        kept.extend(ranked.into_iter().take(b).map(|(p, _)| p));
        heads.push(kept);
    }
    let union = heads.iter().flatten().copied().collect();
    Ok((heads, union))
}

/// Cut `union` down to `min(capacity, |union|)` positions. Protected
/// positions always stay; the rest are ranked by how many heads chose them,
/// then by aggregate score, then by lower index.
pub fn trim_union_consensus(
    union: &BTreeSet<LogicalPosition>,
    head_selections: &[BTreeSet<LogicalPosition>],
    aggregate_scores: &BTreeMap<LogicalPosition, f64>,
    capacity: usize,
    protected: &BTreeSet<LogicalPosition>,
) -> Result<BTreeSet<LogicalPosition>> {
    if protected.len() > capacity {
        return Err(Error::OverProtected {
            protected: protected.len(),
            capacity,
        });
    }
    if let Some(p) = protected.iter().find(|p| !union.contains(p)) {
        return Err(Error::InvalidInput(format!("protected {p} missing from union")));
    }
    if union.len() <= capacity {
        return Ok(union.clone());
    }
    let mut rest: Vec<_> = union
        .iter()
        .filter(|p| !protected.contains(p))
        .map(|&p| {
            let votes = head_selections.iter().filter(|s| s.contains(&p)).count();
            let agg = aggregate_scores.get(&p).copied().unwrap_or(0.0);
            (p, votes, agg)
        })
        .collect();
    rest.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(b.2.total_cmp(&a.2))
            .then(a.0.cmp(&b.0))
    });
    let mut kept = protected.clone();
    kept.extend(rest.into_iter().take(capacity - protected.len()).map(|(p, ..)| p));
    Ok(kept)
}

/// Sum of per-head scores for every cached position.
pub fn aggregate_scores(id: PolicyId, state: &CacheState) -> BTreeMap<LogicalPosition, f64> {
    state
        .rows()
        .map(|(p, r)| (p, r.heads.iter().map(|c| head_score(id, c)).sum()))
        .collect()
}

pub(super) fn select_faithful(
    spec: &PolicySpec,
    state: &CacheState,
    protected: &ProtectedSet,
    pool: &[LogicalPosition],
    k: usize,
) -> Result<VictimSelection> {
    let target = state.len() - k;
    let keep_unprotected = pool.len() - k;
    let entropies = head_entropies(spec.id, state);
    let budgets = allocate_per_head_budgets(&entropies, state.n_heads() * keep_unprotected)?;
    let (heads, union) = select_per_head(spec, state, &budgets, protected)?;
    let aggregate = aggregate_scores(spec.id, state);
    let kept_protected: BTreeSet<_> = state.positions().filter(|p| protected.contains(*p)).collect();
    let mut retained = trim_union_consensus(&union, &heads, &aggregate, target, &kept_protected)?;

    if retained.len() < target {
        let mut spare: Vec<_> = pool
            .iter()
            .filter(|p| !retained.contains(p))
            .map(|&p| (p, aggregate[&p]))
            .collect();
        spare.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let need = target - retained.len();
        retained.extend(spare.into_iter().take(need).map(|(p, _)| p));
    }

    let mut victims: Vec<_> = pool
        .iter()
        .filter(|p| !retained.contains(p))
        .map(|&p| (p, aggregate[&p]))
        .collect();
    victims.sort_by(|a, b| eviction_order(*a, *b));
    Ok(VictimSelection {
        victims: victims.into_iter().map(|(p, _)| p).collect(),
        per_head_retention: Some(heads),
    })
}
