//! Attention/log-prob trace files (JSONL, one record per token).
//!
//! Per item: one `prefill` record for every prompt position, `step` running
//! 0, 1, 2, ..., followed by one `decode` record per generated token. A
//! prefill record's `heads` may be empty when that query's attention was not
//! recorded; otherwise it has one sparse row per KV head, causal (positions
//! no later than the query for prefill, strictly earlier for decode).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::{EventKind, LogicalPosition};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub item_id: String,
    pub step: u64,
    pub kind: EventKind,
    pub token: String,
    #[serde(default)]
    pub logprob: Option<f64>,
    #[serde(default)]
    pub heads: Vec<BTreeMap<LogicalPosition, f64>>,
    #[serde(default)]
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub items: usize,
    pub records: usize,
    pub n_heads: Option<usize>,
}

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Check every structural rule; the first violation is reported with the
/// item id and step.
pub fn validate_records(records: &[TraceRecord]) -> Result<TraceSummary> {
    let mut by_item: BTreeMap<&str, Vec<&TraceRecord>> = BTreeMap::new();
    for r in records {
        by_item.entry(r.item_id.as_str()).or_default().push(r);
    }
    let mut n_heads: Option<usize> = None;
    for (id, recs) in &by_item {
        let err = |step: u64, why: String| Error::Trace(format!("item {id} step {step}: {why}"));
        let mut prev: Option<u64> = None;
        let mut seen_decode = false;
        for r in recs {
            if let Some(p) = prev {
                if r.step <= p {
                    return Err(err(r.step, format!("step not above previous {p}")));
                }
            }
            match r.kind {
                EventKind::Prefill if seen_decode => {
                    return Err(err(r.step, "prefill after decode".into()));
                }
                EventKind::Prefill => {
                    let want = prev.map_or(0, |p| p + 1);
                    if r.step != want {
                        return Err(err(r.step, format!("prefill steps must be contiguous from 0 (expected {want})")));
                    }
                }
                EventKind::Decode => seen_decode = true,
            }
            prev = Some(r.step);
            if r.heads.is_empty() {
                continue;
            }
            match n_heads {
                None => n_heads = Some(r.heads.len()),
                Some(k) if k != r.heads.len() => {
                    return Err(err(r.step, format!("{} head rows, expected {k}", r.heads.len())));
                }
                _ => {}
            }
            for (h, row) in r.heads.iter().enumerate() {
                let mut sum = 0.0;
                for (p, w) in row {
                    let causal = match r.kind {
                        EventKind::Prefill => u64::from(p.0) <= r.step,
                        EventKind::Decode => u64::from(p.0) < r.step,
                    };
                    if !causal {
                        return Err(err(r.step, format!("head {h} attends to future {p}")));
                    }
                    if !w.is_finite() || *w < 0.0 {
                        return Err(err(r.step, format!("head {h} weight {w}")));
                    }
                    sum += w;
                }
                if r.normalized && !row.is_empty() && (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(err(r.step, format!("head {h} row sums to {sum}")));
                }
            }
        }
        if !seen_decode {
            return Err(Error::Trace(format!("item {id}: no decode records")));
        }
        if recs[0].kind != EventKind::Prefill {
            return Err(Error::Trace(format!("item {id}: no prefill records")));
        }
    }
    Ok(TraceSummary {
        items: by_item.len(),
        records: records.len(),
        n_heads,
    })
}

pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Trace(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRecord>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_trace(std::io::BufReader::new(f))
}

pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, kind: EventKind, heads: Vec<Vec<(u32, f64)>>) -> TraceRecord {
        TraceRecord {
            item_id: "x".into(),
            step,
            kind,
            token: format!("t{step}"),
            logprob: None,
            heads: heads
                .into_iter()
                .map(|r| r.into_iter().map(|(p, w)| (LogicalPosition(p), w)).collect())
                .collect(),
            normalized: true,
        }
    }

    fn good() -> Vec<TraceRecord> {
        vec![
            rec(0, EventKind::Prefill, vec![]),
            rec(1, EventKind::Prefill, vec![vec![(0, 0.5), (1, 0.5)]]),
            rec(2, EventKind::Decode, vec![vec![(0, 0.2), (1, 0.8)]]),
        ]
    }

    #[test]
    fn accepts_well_formed() {
        let s = validate_records(&good()).unwrap();
        assert_eq!((s.items, s.records, s.n_heads), (1, 3, Some(1)));
    }

    #[test]
    fn rejects_structural_errors() {
        let mut t = good();
        t[2].step = 1;
        assert!(validate_records(&t).is_err());

        let mut t = good();
        t.push(rec(3, EventKind::Prefill, vec![]));
        assert!(validate_records(&t).is_err());

        let t = good()[..2].to_vec();
        assert!(validate_records(&t).is_err());

        let mut t = good();
        t[2].heads[0].insert(LogicalPosition(2), 0.0);
        assert!(validate_records(&t).is_err());

        let mut t = good();
        t[1].heads[0].insert(LogicalPosition(0), 0.9);
        assert!(validate_records(&t).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let mut buf = Vec::new();
        write_trace(&mut buf, &good()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"kind\":\"prefill\""));
        assert!(text.contains("\"0\":0.5"));
        assert_eq!(read_trace(&buf[..]).unwrap(), good());
    }

    #[test]
    fn bad_json_names_line() {
        let err = read_trace("{}\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
