//! Run driver for both eviction regimes.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{BenchItem, CacheView, ModelAdapter, Regime, RegimeConfig, Strategy};
use crate::cache::{
    compute_protected_set, CacheState, EventKind, LogicalPosition, ProtectedSet, ProtectionConfig,
};
use crate::credit::{
    attention_shares, extract_features, CreditConfig, CreditDiagnostics, CreditEstimator,
    EvictionEventLog, VictimRecord,
};
use crate::error::{Error, Result};
use crate::io::trace::TraceRecord;
use crate::metrics::MetricResult;
use crate::policy::{candidates, select_victims, PolicyId, PolicySpec};

/// One policy invocation that removed at least one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionRecord {
    pub step: u64,
    /// Highest position admitted when the policy ran.
    pub admitted_through: LogicalPosition,
    pub victims: Vec<LogicalPosition>,
    pub protected: Vec<LogicalPosition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub item_id: String,
    pub strategy: String,
    pub policy: String,
    pub variant: String,
    pub regime: Regime,
    pub capacity: usize,
    pub protection: ProtectionConfig,
    pub prompt_len: usize,
    pub generated: Vec<String>,
    pub logprobs: Vec<f64>,
    /// Wall time of each adapter decode call.
    pub decode_step_secs: Vec<f64>,
    /// Wall time spent choosing victims.
    pub policy_secs: f64,
    pub evictions: Vec<EvictionRecord>,
    pub final_cache: Vec<LogicalPosition>,
    pub max_cache_len: usize,
    pub metrics: MetricResult,
    pub failed: Option<String>,
    pub credit: Option<CreditDiagnostics>,
}

impl RunRecord {
    pub fn eviction_count(&self) -> usize {
        self.evictions.len()
    }
}

impl From<PolicySpec> for Strategy {
    fn from(p: PolicySpec) -> Self {
        Strategy::Policy(p)
    }
}

/// Dispatch on `cfg.regime`. Never fails: errors become a flagged record.
pub fn run_item<A: ModelAdapter + ?Sized>(
    adapter: &mut A,
    item: &BenchItem,
    strategy: Strategy,
    prot: &ProtectionConfig,
    cfg: &RegimeConfig,
) -> RunRecord {
    let mut run = Run::new(item, strategy, *prot, *cfg);
    let outcome = run.execute(adapter);
    run.finish(outcome)
}

pub fn run_decode_regime<A: ModelAdapter + ?Sized>(
    adapter: &mut A,
    item: &BenchItem,
    strategy: impl Into<Strategy>,
    prot: &ProtectionConfig,
    cfg: &RegimeConfig,
) -> RunRecord {
    let cfg = RegimeConfig {
        regime: Regime::Decode,
        ..*cfg
    };
    run_item(adapter, item, strategy.into(), prot, &cfg)
}

pub fn run_prefill_regime<A: ModelAdapter + ?Sized>(
    adapter: &mut A,
    item: &BenchItem,
    strategy: impl Into<Strategy>,
    prot: &ProtectionConfig,
    cfg: &RegimeConfig,
) -> RunRecord {
    let cfg = RegimeConfig {
        regime: Regime::PrefillChunked,
        ..*cfg
    };
    run_item(adapter, item, strategy.into(), prot, &cfg)
}

/// Rebuild the final cache contents from a record's eviction log.
pub fn replay_final_cache(record: &RunRecord) -> BTreeSet<LogicalPosition> {
    let mut cache = BTreeSet::new();
    let mut next = 0u32;
    for ev in &record.evictions {
        while next <= ev.admitted_through.0 {
            cache.insert(LogicalPosition(next));
            next += 1;
        }
        for v in &ev.victims {
            cache.remove(v);
        }
    }
    let end = (record.prompt_len + record.generated.len()) as u32;
    cache.extend((next..end).map(LogicalPosition));
    cache
}

/// Run `item` with nothing evicted and record every attention row, token and
/// log-probability in the trace format.
pub fn capture_trace<A: ModelAdapter + ?Sized>(
    adapter: &mut A,
    item: &BenchItem,
    max_new_tokens: usize,
) -> Result<Vec<TraceRecord>> {
    let len = item.prompt_len();
    let normalized = adapter.attention_normalized();
    let mut state = CacheState::new(len + max_new_tokens, adapter.n_heads())?;
    let hidden: Vec<BTreeSet<LogicalPosition>> = Vec::new();
    adapter.begin(item)?;
    let prompt: Vec<LogicalPosition> = (0..len).map(LogicalPosition::from).collect();
    state.admit(&prompt)?;
    let events = adapter.prefill_attention(0..len, &CacheView::new(&state, &hidden))?;
    let mut by_step: BTreeMap<u64, _> = events.into_iter().map(|e| (e.step, e.heads)).collect();
    let mut out: Vec<TraceRecord> = item
        .prompt
        .iter()
        .enumerate()
        .map(|(i, tok)| TraceRecord {
            item_id: item.id.clone(),
            step: i as u64,
            kind: EventKind::Prefill,
            token: tok.clone(),
            logprob: None,
            heads: by_step.remove(&(i as u64)).unwrap_or_default(),
            normalized,
        })
        .collect();
    for i in 0..max_new_tokens {
        let pos = len + i;
        let o = adapter.decode_step(pos, &CacheView::new(&state, &hidden))?;
        state.apply_event(&o.event)?;
        let Some(token) = o.token else { break };
        out.push(TraceRecord {
            item_id: item.id.clone(),
            step: pos as u64,
            kind: EventKind::Decode,
            token,
            logprob: Some(o.logprob),
            heads: o.event.heads,
            normalized,
        });
        state.advance_clock(pos as u64);
        state.admit(&[LogicalPosition::from(pos)])?;
    }
    Ok(out)
}

// ── internals ───────────────────────────────────────────────────────────────

struct PendingObservation {
    log: EvictionEventLog,
    baseline: f64,
}

struct CreditRuntime {
    estimator: CreditEstimator,
    pending: Option<PendingObservation>,
    lambdas: Vec<f64>,
    uncertainties: Vec<f64>,
}

impl CreditRuntime {
    fn new(config: CreditConfig) -> Self {
        Self {
            estimator: CreditEstimator::new(config),
            pending: None,
            lambdas: Vec::new(),
            uncertainties: Vec::new(),
        }
    }

    fn finalize(&mut self) {
        if let Some(p) = self.pending.take() {
            self.estimator.observe(&p.log);
        }
    }

    fn record_logprob(&mut self, lp: f64, tau: usize) {
        if let Some(p) = &mut self.pending {
            if p.log.deltas.len() < tau {
                p.log.deltas.push(lp - p.baseline);
            }
        }
    }

    fn select(
        &mut self,
        state: &CacheState,
        protected: &ProtectedSet,
        k: usize,
        baseline: Option<f64>,
    ) -> Result<Vec<LogicalPosition>> {
        self.finalize();
        let lru = PolicySpec::simplified(PolicyId::Lru);
        let pool = candidates(&lru, state, protected);
        let lru_order = select_victims(&lru, state, protected, pool.len())?.victims;
        let features = extract_features(state, &pool)?;
        let order = self.estimator.blended_eviction_order(&lru_order, &features);
        let victims = order[..k].to_vec();
        self.lambdas.push(self.estimator.lambda());
        self.uncertainties.push(self.estimator.uncertainty);
        // No log-probability precedes the initial compression, so there is no
        // baseline to measure against.
        if let Some(baseline) = baseline {
            let shares = attention_shares(state, &victims);
            let log = EvictionEventLog {
                step: state.step_clock(),
                victims: victims
                    .iter()
                    .zip(shares)
                    .map(|(p, s)| VictimRecord {
                        position: *p,
                        attention_share: s,
                        features: features[p],
                    })
                    .collect(),
                deltas: Vec::new(),
            };
            self.pending = Some(PendingObservation { log, baseline });
        }
        Ok(victims)
    }

    fn diagnostics(mut self) -> CreditDiagnostics {
        self.finalize();
        let e = self.estimator;
        CreditDiagnostics {
            weights: e.weights,
            uncertainty: e.uncertainty,
            observations_seen: e.observations_seen,
            skipped_observations: e.skipped_observations,
            lambda_trajectory: self.lambdas,
            uncertainty_trajectory: self.uncertainties,
        }
    }
}

struct Run<'a> {
    item: &'a BenchItem,
    strategy: Strategy,
    prot: ProtectionConfig,
    cfg: RegimeConfig,
    state: Option<CacheState>,
    /// Per head: cached positions that head dropped at the last per-head
    /// invocation. Later admissions are visible to every head.
    hidden: Vec<BTreeSet<LogicalPosition>>,
    credit: Option<CreditRuntime>,
    generated: Vec<String>,
    logprobs: Vec<f64>,
    decode_secs: Vec<f64>,
    policy_secs: f64,
    evictions: Vec<EvictionRecord>,
    max_len: usize,
}

impl<'a> Run<'a> {
    fn new(item: &'a BenchItem, strategy: Strategy, prot: ProtectionConfig, cfg: RegimeConfig) -> Self {
        let credit = match strategy {
            Strategy::Credit(c) => Some(CreditRuntime::new(c)),
            Strategy::Policy(_) => None,
        };
        Self {
            item,
            strategy,
            prot,
            cfg,
            state: None,
            hidden: Vec::new(),
            credit,
            generated: Vec::new(),
            logprobs: Vec::new(),
            decode_secs: Vec::new(),
            policy_secs: 0.0,
            evictions: Vec::new(),
            max_len: 0,
        }
    }

    fn state(&mut self) -> &mut CacheState {
        self.state.as_mut().expect("state initialized")
    }

    fn execute<A: ModelAdapter + ?Sized>(&mut self, adapter: &mut A) -> Result<()> {
        self.cfg.validate()?;
        self.prot.validate()?;
        if let Strategy::Policy(p) = &self.strategy {
            p.validate()?;
        }
        self.item.validate()?;
        let len = self.item.prompt_len();
        if len > self.cfg.prompt_token_cap {
            return Err(Error::InvalidInput(format!(
                "item {}: {len} prompt tokens exceed the cap of {}",
                self.item.id, self.cfg.prompt_token_cap
            )));
        }
        self.state = Some(CacheState::new(self.cfg.capacity, adapter.n_heads())?);
        adapter.begin(self.item)?;

        match self.cfg.regime {
            Regime::Decode => {
                self.ingest(adapter, 0..len)?;
                self.state().finish_prefill()?;
                self.evict_overflow(None)?;
            }
            Regime::PrefillChunked => {
                let chunk = self.cfg.chunk_size.unwrap_or(len).max(1);
                let mut start = 0;
                while start < len {
                    let end = (start + chunk).min(len);
                    self.ingest(adapter, start..end)?;
                    self.evict_overflow(None)?;
                    start = end;
                }
                self.state().finish_prefill()?;
            }
        }
        self.decode(adapter, len)
    }

    fn ingest<A: ModelAdapter + ?Sized>(
        &mut self,
        adapter: &mut A,
        range: std::ops::Range<usize>,
    ) -> Result<()> {
        let positions: Vec<LogicalPosition> = range.clone().map(LogicalPosition::from).collect();
        self.state().admit(&positions)?;
        let state = self.state.as_ref().expect("state initialized");
        let events = adapter.prefill_attention(range, &CacheView::new(state, &self.hidden))?;
        let state = self.state.as_mut().expect("state initialized");
        for e in &events {
            state.apply_event(e)?;
        }
        self.max_len = self.max_len.max(state.len());
        Ok(())
    }

    fn decode<A: ModelAdapter + ?Sized>(&mut self, adapter: &mut A, len: usize) -> Result<()> {
        let tau = self.cfg.tau;
        let mut since = 0;
        for i in 0..self.cfg.max_new_tokens {
            if since == tau {
                let baseline = self.logprobs.last().copied();
                self.evict_overflow(baseline)?;
                since = 0;
            }
            let pos = len + i;
            let state = self.state.as_ref().expect("state initialized");
            let t0 = Instant::now();
            let out = adapter.decode_step(pos, &CacheView::new(state, &self.hidden))?;
            self.decode_secs.push(t0.elapsed().as_secs_f64());
            self.state().apply_event(&out.event)?;
            let Some(token) = out.token else { break };
            self.generated.push(token);
            self.logprobs.push(out.logprob);
            if let Some(c) = &mut self.credit {
                c.record_logprob(out.logprob, tau);
            }
            let state = self.state();
            state.advance_clock(pos as u64);
            state.admit(&[LogicalPosition::from(pos)])?;
            let n = state.len();
            self.max_len = self.max_len.max(n);
            since += 1;
        }
        Ok(())
    }

    fn evict_overflow(&mut self, baseline: Option<f64>) -> Result<()> {
        let state = self.state.as_ref().expect("state initialized");
        let k = state.overflow();
        if k == 0 {
            return Ok(());
        }
        let protected = compute_protected_set(&self.prot, state);
        if protected.len() > state.capacity() {
            return Err(Error::OverProtected {
                protected: protected.len(),
                capacity: state.capacity(),
            });
        }
        let t0 = Instant::now();
        let victims = match (&self.strategy, &mut self.credit) {
            (Strategy::Credit(_), Some(c)) => c.select(state, &protected, k, baseline)?,
            (Strategy::Policy(spec), _) => {
                let sel = select_victims(spec, state, &protected, k)?;
                if let Some(heads) = sel.per_head_retention {
                    let victim_set: BTreeSet<_> = sel.victims.iter().copied().collect();
                    self.hidden = heads
                        .iter()
                        .map(|kept| {
                            state
                                .positions()
                                .filter(|p| !victim_set.contains(p) && !kept.contains(p))
                                .collect()
                        })
                        .collect();
                }
                sel.victims
            }
            (Strategy::Credit(_), None) => unreachable!("credit runtime set in Run::new"),
        };
        self.policy_secs += t0.elapsed().as_secs_f64();
        let step = state.step_clock();
        let admitted_through = state.last_admitted().unwrap_or(LogicalPosition(0));
        self.state().evict(&victims, &protected)?;
        self.evictions.push(EvictionRecord {
            step,
            admitted_through,
            victims,
            protected: protected.all().into_iter().collect(),
        });
        Ok(())
    }

    fn finish(self, outcome: Result<()>) -> RunRecord {
        let refs: Vec<&str> = self.item.references.iter().map(String::as_str).collect();
        let (metrics, failed) = match outcome {
            Ok(()) => (MetricResult::score(&self.generated, &refs), None),
            Err(e) => (MetricResult::default(), Some(e.to_string())),
        };
        let (name, variant) = (self.strategy.name(), self.strategy.variant().to_string());
        RunRecord {
            item_id: self.item.id.clone(),
            strategy: self.strategy.to_string(),
            policy: name,
            variant,
            regime: self.cfg.regime,
            capacity: self.cfg.capacity,
            protection: self.prot,
            prompt_len: self.item.prompt_len(),
            final_cache: self
                .state
                .as_ref()
                .map(|s| s.positions().collect())
                .unwrap_or_default(),
            generated: self.generated,
            logprobs: self.logprobs,
            decode_step_secs: self.decode_secs,
            policy_secs: self.policy_secs,
            evictions: self.evictions,
            max_cache_len: self.max_len,
            metrics,
            failed,
            credit: self.credit.map(CreditRuntime::diagnostics),
        }
    }
}
