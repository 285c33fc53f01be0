//! Result rows: one self-describing JSON line per (item, cell).

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::RunRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub item_id: String,
    /// Canonical condition string; rows with equal `cell` are one condition.
    pub cell: String,
    pub policy: String,
    pub variant: String,
    /// Capacity as configured (`256`, `13%`, `full`).
    pub capacity: String,
    /// Resolved capacity for this item.
    #[serde(rename = "C")]
    pub c: usize,
    pub protection: String,
    pub rho: f64,
    pub suffix_mode: String,
    pub regime: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub token_f1: f64,
    pub rouge_l_f1: f64,
    pub repetition_rate: f64,
    pub gen_len: usize,
    pub decode_step_mean: f64,
    pub decode_step_p50: f64,
    pub decode_step_p95: f64,
    pub decode_step_p99: f64,
    pub policy_time: f64,
    pub eviction_count: usize,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ResultRow {
    pub fn from_record(record: &RunRecord, cell: &str, capacity: &str, domain: Option<String>) -> Self {
        let t = &record.decode_step_secs;
        let prot = &record.protection;
        Self {
            item_id: record.item_id.clone(),
            cell: cell.to_string(),
            policy: record.policy.clone(),
            variant: record.variant.clone(),
            capacity: capacity.to_string(),
            c: record.capacity,
            protection: prot.mode.as_str().to_string(),
            rho: prot.rho(),
            suffix_mode: prot.suffix_mode.as_str().to_string(),
            regime: record.regime.as_str().to_string(),
            domain,
            token_f1: record.metrics.token_f1,
            rouge_l_f1: record.metrics.rouge_l_f1,
            repetition_rate: record.metrics.repetition_rate_4gram,
            gen_len: record.metrics.generation_length,
            decode_step_mean: if t.is_empty() { 0.0 } else { t.iter().sum::<f64>() / t.len() as f64 },
            decode_step_p50: percentile(t, 0.50),
            decode_step_p95: percentile(t, 0.95),
            decode_step_p99: percentile(t, 0.99),
            policy_time: record.policy_secs,
            eviction_count: record.eviction_count(),
            failed: record.failed.is_some(),
            error: record.failed.clone(),
        }
    }

    /// Resume key.
    pub fn key(&self) -> (String, String) {
        (self.cell.clone(), self.item_id.clone())
    }

    /// Copy with every wall-clock field zeroed.
    pub fn without_timings(&self) -> Self {
        Self {
            decode_step_mean: 0.0,
            decode_step_p50: 0.0,
            decode_step_p95: 0.0,
            decode_step_p99: 0.0,
            policy_time: 0.0,
            ..self.clone()
        }
    }
}

fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn write_row<W: Write>(mut w: W, row: &ResultRow) -> Result<()> {
    serde_json::to_writer(&mut w, row)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Parse rows. A final line without its newline is an interrupted write and
/// is skipped when `tolerate_torn_tail` is set.
pub fn read_rows<R: BufRead>(mut reader: R, tolerate_torn_tail: bool) -> Result<Vec<ResultRow>> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut rows = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => rows.push(r),
            Err(_) if tolerate_torn_tail && !complete && i + 1 == lines.len() => {}
            Err(e) => return Err(Error::Io(format!("row line {}: {e}", i + 1))),
        }
    }
    Ok(rows)
}

pub fn read_rows_file(path: &Path) -> Result<Vec<ResultRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_rows(std::io::BufReader::new(f), false)
}
