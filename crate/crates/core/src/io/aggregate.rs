//! Summary tables over result rows: per-condition means with bootstrap
//! intervals, recovery against the full cache, item-matched protection lift,
//! and the protection sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::matrix::collect_rows;
use super::results::ResultRow;
use crate::cache::{ProtectionConfig, ProtectionMode};
use crate::error::{Error, Result};
use crate::harness::{BenchItem, ModelAdapter};
use crate::metrics::{pearson, recovery_pct};
use crate::stats::{bootstrap_ci, mean, wilcoxon_signed_rank, Interval, PairedSample, DEFAULT_RESAMPLES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateOptions {
    pub by_domain: bool,
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self {
            by_domain: false,
            resamples: DEFAULT_RESAMPLES,
            level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub cell: String,
    pub domain: Option<String>,
    pub policy: String,
    pub variant: String,
    pub capacity: String,
    pub protection: String,
    pub regime: String,
    pub n: usize,
    pub failed: usize,
    /// Over non-failed rows; `None` if every row failed.
    pub mean_f1: Option<f64>,
    pub ci: Option<Interval>,
    pub mean_rouge_l: Option<f64>,
    pub mean_gen_len: Option<f64>,
    pub recovery_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftRow {
    pub cell: String,
    pub baseline_cell: Option<String>,
    pub domain: Option<String>,
    /// Items scored in both conditions.
    pub n: usize,
    /// Mean of protected − unprotected F1; `None` when undefined.
    pub lift: Option<f64>,
    pub ci: Option<Interval>,
    pub wilcoxon_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub groups: Vec<GroupSummary>,
    pub lifts: Vec<LiftRow>,
    /// Pearson r between condition-mean token-F1 and ROUGE-L F1.
    pub f1_rouge_pearson: Option<f64>,
}

type GroupKey = (String, Option<String>);

fn group_rows<'a>(rows: &'a [ResultRow], by_domain: bool) -> BTreeMap<GroupKey, Vec<&'a ResultRow>> {
    let mut groups: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let domain = if by_domain { r.domain.clone() } else { None };
        groups.entry((r.cell.clone(), domain)).or_default().push(r);
    }
    groups
}

fn ok_values(rows: &[&ResultRow], f: impl Fn(&ResultRow) -> f64) -> Vec<f64> {
    rows.iter().filter(|r| !r.failed).map(|r| f(r)).collect()
}

/// Same policy, capacity and regime with no guard.
fn baseline_of(r: &ResultRow) -> (String, String, String, String) {
    (r.policy.clone(), r.variant.clone(), r.capacity.clone(), r.regime.clone())
}

pub fn aggregate(rows: &[ResultRow], opts: &AggregateOptions) -> Result<AggregateTable> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no rows to aggregate".into()));
    }
    let groups = group_rows(rows, opts.by_domain);

    // Full-cache ceiling per (regime, domain), pooled over policies.
    let mut ceilings: BTreeMap<(String, Option<String>), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.capacity == "full" && !r.failed) {
        let domain = if opts.by_domain { r.domain.clone() } else { None };
        ceilings.entry((r.regime.clone(), domain)).or_default().push(r.token_f1);
    }

    let mut summaries = Vec::new();
    for ((cell, domain), members) in &groups {
        let first = members[0];
        let f1 = ok_values(members, |r| r.token_f1);
        let mean_f1 = mean(&f1);
        let ci = if f1.is_empty() {
            None
        } else {
            Some(bootstrap_ci(&f1, opts.resamples, opts.level, opts.seed)?)
        };
        let ceiling = ceilings
            .get(&(first.regime.clone(), domain.clone()))
            .and_then(|v| mean(v));
        summaries.push(GroupSummary {
            cell: cell.clone(),
            domain: domain.clone(),
            policy: first.policy.clone(),
            variant: first.variant.clone(),
            capacity: first.capacity.clone(),
            protection: protection_label(first),
            regime: first.regime.clone(),
            n: members.len(),
            failed: members.len() - f1.len(),
            mean_f1,
            ci,
            mean_rouge_l: mean(&ok_values(members, |r| r.rouge_l_f1)),
            mean_gen_len: mean(&ok_values(members, |r| r.gen_len as f64)),
            recovery_pct: mean_f1.zip(ceiling).and_then(|(f, c)| recovery_pct(f, c)),
        });
    }

    let mut lifts = Vec::new();
    for ((cell, domain), members) in &groups {
        let first = members[0];
        if first.protection == ProtectionMode::None.as_str() {
            continue;
        }
        let base = groups.iter().find(|((_, d), m)| {
            d == domain && m[0].protection == ProtectionMode::None.as_str() && baseline_of(m[0]) == baseline_of(first)
        });
        let Some(((base_cell, _), base_rows)) = base else {
            lifts.push(LiftRow {
                cell: cell.clone(),
                baseline_cell: None,
                domain: domain.clone(),
                n: 0,
                lift: None,
                ci: None,
                wilcoxon_p: None,
            });
            continue;
        };
        let ids = |m: &[&ResultRow]| m.iter().map(|r| r.item_id.clone()).collect::<BTreeSet<_>>();
        let (a_ids, b_ids) = (ids(members), ids(base_rows));
        if a_ids != b_ids {
            let missing: Vec<_> = a_ids.symmetric_difference(&b_ids).cloned().collect();
            return Err(Error::MismatchedItems(format!(
                "lift {cell} vs {base_cell}: unmatched items {}",
                missing.join(", ")
            )));
        }
        let scores = |m: &[&ResultRow]| -> BTreeMap<String, f64> {
            m.iter().filter(|r| !r.failed).map(|r| (r.item_id.clone(), r.token_f1)).collect()
        };
        let (mut a, mut b) = (scores(members), scores(base_rows));
        a.retain(|k, _| b.contains_key(k));
        b.retain(|k, _| a.contains_key(k));
        let (lift, ci, p) = if a.is_empty() {
            (None, None, None)
        } else {
            let pair = PairedSample::from_maps(&a, &b)?;
            let diffs = pair.diffs();
            (
                mean(&diffs),
                Some(bootstrap_ci(&diffs, opts.resamples, opts.level, opts.seed)?),
                Some(wilcoxon_signed_rank(&diffs).p_value),
            )
        };
        lifts.push(LiftRow {
            cell: cell.clone(),
            baseline_cell: Some(base_cell.clone()),
            domain: domain.clone(),
            n: a.len(),
            lift,
            ci,
            wilcoxon_p: p,
        });
    }

    let (f1s, rouges): (Vec<f64>, Vec<f64>) = summaries
        .iter()
        .filter_map(|g| g.mean_f1.zip(g.mean_rouge_l))
        .unzip();
    Ok(AggregateTable {
        groups: summaries,
        lifts,
        f1_rouge_pearson: pearson(&f1s, &rouges),
    })
}

fn protection_label(r: &ResultRow) -> String {
    if r.protection == ProtectionMode::None.as_str() {
        r.protection.clone()
    } else {
        format!("{}:{}", r.protection, r.rho)
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "---".to_string(), |x| format!("{x:.digits$}"))
}

fn interval(ci: Option<Interval>) -> String {
    ci.map_or_else(|| "---".to_string(), |c| format!("[{:.3}, {:.3}]", c.lower, c.upper))
}

impl AggregateTable {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<44} {:<8} {:>4} {:>4} {:>7} {:>18} {:>8} {:>8}",
            "condition", "domain", "n", "fail", "F1", "95% CI", "recov%", "gen_len"
        );
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{:<44} {:<8} {:>4} {:>4} {:>7} {:>18} {:>8} {:>8}",
                g.cell,
                g.domain.as_deref().unwrap_or("all"),
                g.n,
                g.failed,
                opt(g.mean_f1, 3),
                interval(g.ci),
                opt(g.recovery_pct, 1),
                opt(g.mean_gen_len, 1),
            );
        }
        if !self.lifts.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "{:<44} {:<8} {:>4} {:>8} {:>18} {:>10}", "protected condition", "domain", "n", "lift", "95% CI", "wilcoxon p");
            for l in &self.lifts {
                let _ = writeln!(
                    s,
                    "{:<44} {:<8} {:>4} {:>8} {:>18} {:>10}",
                    l.cell,
                    l.domain.as_deref().unwrap_or("all"),
                    l.n,
                    opt(l.lift, 3),
                    interval(l.ci),
                    l.wilcoxon_p.map_or_else(|| "---".to_string(), |p| format!("{p:.2e}")),
                );
            }
        }
        let _ = writeln!(s, "\nPearson r(F1, ROUGE-L) over conditions: {}", opt(self.f1_rouge_pearson, 3));
        s
    }
}

// ── sweep ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub cell: String,
    pub n: usize,
    pub mean_f1: Option<f64>,
    /// Wilcoxon p-value against the previous ρ level.
    pub step_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// ρ = 0 is no guard; anything else a bilateral guard of that size.
pub fn sweep_protection_configs(rhos: &[f64]) -> Vec<ProtectionConfig> {
    rhos.iter()
        .map(|&r| if r == 0.0 { ProtectionConfig::none() } else { ProtectionConfig::bilateral(r) })
        .collect()
}

/// Run the first configured policy at the first capacity across `cfg.rho`.
pub fn sweep_protection<F>(
    cfg: &ExperimentConfig,
    items: &[BenchItem],
    make_adapter: F,
) -> Result<(Vec<ResultRow>, SweepTable)>
where
    F: Fn() -> Box<dyn ModelAdapter> + Sync,
{
    if cfg.rho.is_empty() {
        return Err(Error::Config("field `rho`: the sweep needs at least one value".into()));
    }
    let (Some(strategy), Some(capacity)) = (cfg.strategies.first(), cfg.capacities.first()) else {
        return Err(Error::Config("the sweep needs a policy and a capacity".into()));
    };
    let mut rhos = cfg.rho.clone();
    rhos.sort_by(f64::total_cmp);
    rhos.dedup();
    let sweep_cfg = ExperimentConfig {
        strategies: vec![*strategy],
        capacities: vec![*capacity],
        protections: sweep_protection_configs(&rhos),
        ..cfg.clone()
    };
    let rows = collect_rows(&sweep_cfg, items, make_adapter)?;
    let table = sweep_table(&rows, &rhos)?;
    Ok((rows, table))
}

/// Per-ρ means and adjacent-level tests from rows of one policy/capacity.
pub fn sweep_table(rows: &[ResultRow], rhos: &[f64]) -> Result<SweepTable> {
    let mut levels: Vec<(f64, String, BTreeMap<String, f64>, usize)> = Vec::new();
    for &rho in rhos {
        let members: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| {
                if rho == 0.0 {
                    r.protection == ProtectionMode::None.as_str()
                } else {
                    r.protection == ProtectionMode::Bilateral.as_str() && r.rho == rho
                }
            })
            .collect();
        let cell = members.first().map(|r| r.cell.clone()).unwrap_or_default();
        let scores = members.iter().filter(|r| !r.failed).map(|r| (r.item_id.clone(), r.token_f1)).collect();
        levels.push((rho, cell, scores, members.len()));
    }
    let mut out = Vec::new();
    for i in 0..levels.len() {
        let (rho, cell, scores, n) = &levels[i];
        let step_p = if i == 0 {
            None
        } else {
            let pair = PairedSample::from_maps(scores, &levels[i - 1].2)?;
            (!pair.ids.is_empty()).then(|| wilcoxon_signed_rank(&pair.diffs()).p_value)
        };
        out.push(SweepRow {
            rho: *rho,
            cell: cell.clone(),
            n: *n,
            mean_f1: mean(&scores.values().copied().collect::<Vec<_>>()),
            step_p,
        });
    }
    Ok(SweepTable { rows: out })
}

impl SweepTable {
    pub fn render(&self) -> String {
        let mut s = format!("{:>6} {:>4} {:>7} {:>10}\n", "rho", "n", "F1", "step p");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6.2} {:>4} {:>7} {:>10}",
                r.rho,
                r.n,
                opt(r.mean_f1, 3),
                r.step_p.map_or_else(|| "---".to_string(), |p| format!("{p:.2e}")),
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(item: &str, cell: &str, protection: &str, f1: f64) -> ResultRow {
        ResultRow {
            item_id: item.into(),
            cell: cell.into(),
            policy: "lru".into(),
            variant: "simplified".into(),
            capacity: "64".into(),
            c: 64,
            protection: protection.into(),
            rho: if protection == "none" { 0.0 } else { 0.1 },
            suffix_mode: "dynamic".into(),
            regime: "decode".into(),
            domain: None,
            token_f1: f1,
            rouge_l_f1: f1,
            repetition_rate: 0.0,
            gen_len: 3,
            decode_step_mean: 0.0,
            decode_step_p50: 0.0,
            decode_step_p95: 0.0,
            decode_step_p99: 0.0,
            policy_time: 0.0,
            eviction_count: 1,
            failed: false,
            error: None,
        }
    }

    #[test]
    fn single_row_mean_is_the_row() {
        let t = aggregate(&[row("a", "x", "none", 0.37)], &AggregateOptions::default()).unwrap();
        assert_eq!(t.groups.len(), 1);
        assert_eq!(t.groups[0].mean_f1, Some(0.37));
        assert_eq!(t.groups[0].ci, Some(Interval { lower: 0.37, upper: 0.37 }));
        assert!(t.lifts.is_empty());
    }

    #[test]
    fn identical_conditions_have_zero_lift() {
        let rows: Vec<_> = ["a", "b", "c"]
            .iter()
            .enumerate()
            .flat_map(|(i, id)| {
                let f = i as f64 / 4.0;
                [row(id, "n", "none", f), row(id, "p", "bilateral", f)]
            })
            .collect();
        let t = aggregate(&rows, &AggregateOptions::default()).unwrap();
        assert_eq!(t.lifts[0].lift, Some(0.0));
        assert_eq!(t.lifts[0].ci, Some(Interval { lower: 0.0, upper: 0.0 }));
    }

    #[test]
    fn missing_baseline_renders_dashes() {
        let t = aggregate(&[row("a", "p", "bilateral", 1.0)], &AggregateOptions::default()).unwrap();
        assert_eq!(t.lifts[0].lift, None);
        assert!(t.render().contains("---"));
    }

    #[test]
    fn unmatched_items_are_listed() {
        let rows = [row("a", "n", "none", 0.0), row("b", "p", "bilateral", 1.0)];
        let msg = aggregate(&rows, &AggregateOptions::default()).unwrap_err().to_string();
        assert!(msg.contains("a") && msg.contains("b"), "{msg}");
    }

    #[test]
    fn empty_rows_rejected() {
        assert!(aggregate(&[], &AggregateOptions::default()).is_err());
    }
}
