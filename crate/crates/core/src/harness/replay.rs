//! Replays recorded traces through the cache engine.
//!
//! Tokens and log-probabilities come straight from the trace; attention
//! rows are filtered to what is still visible and rescaled when the trace
//! declares normalized rows.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use super::{BenchItem, CacheView, DecodeOutput, ModelAdapter, PromptRegions};
use crate::cache::{AttentionEvent, EventKind, LogicalPosition};
use crate::error::{Error, Result};
use crate::io::trace::{validate_records, TraceRecord};

#[derive(Debug)]
struct ItemTrace {
    prefill: Vec<TraceRecord>,
    decode: Vec<TraceRecord>,
}

#[derive(Debug, Clone)]
pub struct ReplayAdapter {
    traces: Arc<BTreeMap<String, ItemTrace>>,
    n_heads: usize,
    current: Option<String>,
}

impl ReplayAdapter {
    pub fn from_records(records: Vec<TraceRecord>) -> Result<Self> {
        let summary = validate_records(&records)?;
        let n_heads = summary
            .n_heads
            .ok_or_else(|| Error::Trace("trace carries no attention rows".into()))?;
        let mut traces: BTreeMap<String, ItemTrace> = BTreeMap::new();
        for r in records {
            let t = traces.entry(r.item_id.clone()).or_insert_with(|| ItemTrace {
                prefill: Vec::new(),
                decode: Vec::new(),
            });
            match r.kind {
                EventKind::Prefill => t.prefill.push(r),
                EventKind::Decode => t.decode.push(r),
            }
        }
        Ok(Self {
            traces: Arc::new(traces),
            n_heads,
            current: None,
        })
    }

    /// Items reconstructed from the traces. Without explicit references an
    /// item's reference is its own full-trace output, so scores measure
    /// agreement with the unevicted generation.
    pub fn items(&self, references: Option<&BTreeMap<String, Vec<String>>>) -> Vec<BenchItem> {
        self.traces
            .iter()
            .map(|(id, t)| {
                let refs = references
                    .and_then(|m| m.get(id).cloned())
                    .unwrap_or_else(|| {
                        vec![t.decode.iter().map(|r| r.token.as_str()).collect::<Vec<_>>().join(" ")]
                    });
                BenchItem {
                    id: id.clone(),
                    prompt: t.prefill.iter().map(|r| r.token.clone()).collect(),
                    references: refs,
                    regions: PromptRegions::default(),
                    needle_position: None,
                    domain: Some("replay".into()),
                }
            })
            .collect()
    }

    fn trace(&self) -> Result<&ItemTrace> {
        let id = self
            .current
            .as_ref()
            .ok_or_else(|| Error::Adapter("replay adapter used before begin()".into()))?;
        Ok(&self.traces[id])
    }

    fn masked(&self, rec: &TraceRecord, cache: &CacheView) -> Vec<BTreeMap<LogicalPosition, f64>> {
        if rec.heads.is_empty() {
            return vec![BTreeMap::new(); self.n_heads];
        }
        rec.heads
            .iter()
            .enumerate()
            .map(|(h, row)| cache.mask_row(h, row, rec.normalized))
            .collect()
    }
}

impl ModelAdapter for ReplayAdapter {
    fn n_heads(&self) -> usize {
        self.n_heads
    }

    fn attention_normalized(&self) -> bool {
        self.traces
            .values()
            .flat_map(|t| t.prefill.iter().chain(&t.decode))
            .all(|r| r.normalized)
    }

    fn begin(&mut self, item: &BenchItem) -> Result<()> {
        let t = self
            .traces
            .get(&item.id)
            .ok_or_else(|| Error::Trace(format!("no trace for item {}", item.id)))?;
        if t.prefill.len() != item.prompt.len() {
            return Err(Error::Trace(format!(
                "item {}: trace prompt has {} tokens, item has {}",
                item.id,
                t.prefill.len(),
                item.prompt.len()
            )));
        }
        self.current = Some(item.id.clone());
        Ok(())
    }

    fn prefill_attention(
        &mut self,
        queries: Range<usize>,
        cache: &CacheView,
    ) -> Result<Vec<AttentionEvent>> {
        let trace = self.trace()?;
        let mut events = Vec::new();
        for rec in trace.prefill.get(queries).unwrap_or_default() {
            if rec.heads.is_empty() {
                continue;
            }
            let query = LogicalPosition(rec.step as u32);
            events.push(AttentionEvent {
                step: rec.step,
                kind: EventKind::Prefill,
                n_visible: cache.visible_upto(query),
                normalized: rec.normalized,
                heads: self.masked(rec, cache),
            });
        }
        Ok(events)
    }

    fn decode_step(&mut self, position: usize, cache: &CacheView) -> Result<DecodeOutput> {
        let trace = self.trace()?;
        let index = position
            .checked_sub(trace.prefill.len())
            .ok_or_else(|| Error::Trace(format!("decode position {position} inside the prompt")))?;
        let Some(rec) = trace.decode.get(index) else {
            return Ok(DecodeOutput {
                token: None,
                logprob: 0.0,
                event: AttentionEvent {
                    step: position as u64,
                    kind: EventKind::Decode,
                    n_visible: cache.len(),
                    normalized: false,
                    heads: vec![BTreeMap::new(); self.n_heads],
                },
            });
        };
        if rec.step != position as u64 {
            return Err(Error::Trace(format!(
                "decode record step {} does not match position {position}",
                rec.step
            )));
        }
        Ok(DecodeOutput {
            token: Some(rec.token.clone()),
            logprob: rec.logprob.unwrap_or(0.0),
            event: AttentionEvent {
                step: rec.step,
                kind: EventKind::Decode,
                n_visible: cache.len(),
                normalized: rec.normalized,
                heads: self.masked(rec, cache),
            },
        })
    }
}
