//! Experiment-matrix runner.
//!
//! Items fan out over a worker pool (`KVGUARD_WORKERS` threads, default all
//! cores); each worker runs every cell for its item and hands rows to a
//! single writer. Rows arrive in completion order.

use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::io::{BufReader, Write};
use std::path::Path;
use std::sync::{mpsc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AdapterChoice, BenchmarkSource, ExperimentConfig};
use super::results::{read_rows, write_row, ResultRow};
use super::trace::read_trace_file;
use crate::cache::ProtectionConfig;
use crate::error::{Error, Result};
use crate::harness::{
    gen_niah, run_item, BenchItem, CapacitySpec, ModelAdapter, RegimeConfig, ReplayAdapter,
    Strategy, ToyAdapter,
};
use crate::seed::cell_seed;

pub const WORKERS_ENV: &str = "KVGUARD_WORKERS";

/// One (strategy × capacity × protection) condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub strategy: Strategy,
    pub capacity: CapacitySpec,
    pub protection: ProtectionConfig,
}

impl Cell {
    pub fn key(&self, regime: &RegimeConfig) -> String {
        format!(
            "{}|{}|{}|{}",
            self.strategy,
            self.capacity,
            self.protection,
            regime.regime.as_str()
        )
    }
}

/// Strategy-major enumeration of every configured cell.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for s in &cfg.strategies {
        for c in &cfg.capacities {
            for p in &cfg.protections {
                out.push(Cell {
                    index: out.len(),
                    strategy: *s,
                    capacity: *c,
                    protection: *p,
                });
            }
        }
    }
    out
}

/// Builds a fresh adapter per worker.
#[derive(Debug, Clone)]
pub enum AdapterFactory {
    Toy(crate::harness::ToyConfig),
    Replay(ReplayAdapter),
}

impl AdapterFactory {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match &cfg.adapter {
            AdapterChoice::Toy(t) => AdapterFactory::Toy(*t),
            AdapterChoice::Replay { trace } => {
                AdapterFactory::Replay(ReplayAdapter::from_records(read_trace_file(trace)?)?)
            }
        })
    }

    pub fn make(&self) -> Box<dyn ModelAdapter> {
        match self {
            AdapterFactory::Toy(t) => Box::new(ToyAdapter::new(*t)),
            AdapterFactory::Replay(r) => Box::new(r.clone()),
        }
    }
}

pub fn load_items(cfg: &ExperimentConfig, factory: &AdapterFactory) -> Result<Vec<BenchItem>> {
    let items = match &cfg.benchmark {
        BenchmarkSource::Niah {
            n_items,
            positions,
            lengths,
            seed,
        } => gen_niah(*n_items, positions, lengths, *seed)?
            .iter()
            .map(|n| n.to_bench_item(cfg.regime.prompt_token_cap))
            .collect::<Result<Vec<_>>>()?,
        BenchmarkSource::Items(path) => read_items_file(path)?,
        BenchmarkSource::Trace => match factory {
            AdapterFactory::Replay(r) => r.items(None),
            AdapterFactory::Toy(_) => {
                return Err(Error::Config("benchmark `trace` needs the replay adapter".into()))
            }
        },
    };
    let mut seen = HashSet::new();
    for it in &items {
        if !seen.insert(it.id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate item id {}", it.id)));
        }
    }
    Ok(items)
}

pub fn read_items_file(path: &Path) -> Result<Vec<BenchItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::InvalidInput(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Run every (item, cell) pair not in `skip`, passing each row to `emit`.
pub fn execute<F, E>(
    cfg: &ExperimentConfig,
    items: &[BenchItem],
    make_adapter: F,
    skip: &HashSet<(String, String)>,
    emit: E,
) -> Result<()>
where
    F: Fn() -> Box<dyn ModelAdapter> + Sync,
    E: Fn(ResultRow) + Sync,
{
    cfg.validate()?;
    let cells = cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        items.par_iter().for_each(|item| {
            let mut adapter = make_adapter();
            for cell in &cells {
                let key = cell.key(&cfg.regime);
                if skip.contains(&(key.clone(), item.id.clone())) {
                    continue;
                }
                let seed = cell_seed(cfg.seed, cell.index as u64, &item.id);
                let regime = RegimeConfig {
                    capacity: cell
                        .capacity
                        .resolve(item.prompt_len(), cfg.regime.max_new_tokens),
                    ..cfg.regime
                };
                let record = run_item(
                    adapter.as_mut(),
                    item,
                    cell.strategy.with_seed(seed),
                    &cell.protection,
                    &regime,
                );
                emit(ResultRow::from_record(
                    &record,
                    &key,
                    &cell.capacity.to_string(),
                    item.domain.clone(),
                ));
            }
        });
    });
    Ok(())
}

/// All rows in memory, ordered by cell then item.
pub fn collect_rows<F>(cfg: &ExperimentConfig, items: &[BenchItem], make_adapter: F) -> Result<Vec<ResultRow>>
where
    F: Fn() -> Box<dyn ModelAdapter> + Sync,
{
    let rows = Mutex::new(Vec::new());
    execute(cfg, items, make_adapter, &HashSet::new(), |r| {
        rows.lock().expect("row lock").push(r)
    })?;
    let cell_order: BTreeMap<String, usize> = cells(cfg)
        .iter()
        .map(|c| (c.key(&cfg.regime), c.index))
        .collect();
    let item_order: BTreeMap<&str, usize> = items.iter().enumerate().map(|(i, it)| (it.id.as_str(), i)).collect();
    let mut rows = rows.into_inner().expect("row lock");
    rows.sort_by_key(|r| (cell_order[&r.cell], item_order[r.item_id.as_str()]));
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixSummary {
    pub written: usize,
    /// Rows already present from an earlier run.
    pub resumed: usize,
    pub failed: usize,
}

/// Append rows for every missing (item, cell) pair to `out`.
pub fn run_matrix(cfg: &ExperimentConfig, out: &Path) -> Result<MatrixSummary> {
    let factory = AdapterFactory::from_config(cfg)?;
    let items = load_items(cfg, &factory)?;
    run_matrix_with(cfg, &items, || factory.make(), out)
}

pub fn run_matrix_with<F>(cfg: &ExperimentConfig, items: &[BenchItem], make_adapter: F, out: &Path) -> Result<MatrixSummary>
where
    F: Fn() -> Box<dyn ModelAdapter> + Sync,
{
    let io_err = |e: std::io::Error| Error::Io(format!("{}: {e}", out.display()));
    let existing = if out.exists() {
        let f = std::fs::File::open(out).map_err(io_err)?;
        read_rows(BufReader::new(f), true)?
    } else {
        Vec::new()
    };
    // Drop a torn final line before appending.
    if out.exists() {
        let text = std::fs::read(out).map_err(io_err)?;
        let cut = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if cut < text.len() {
            let f = OpenOptions::new().write(true).open(out).map_err(io_err)?;
            f.set_len(cut as u64).map_err(io_err)?;
        }
    }
    let skip: HashSet<(String, String)> = existing.iter().map(ResultRow::key).collect();
    let mut file = OpenOptions::new().create(true).append(true).open(out).map_err(io_err)?;

    let (tx, rx) = mpsc::channel::<ResultRow>();
    let tx = Mutex::new(tx);
    let (written, failed, run) = std::thread::scope(|s| {
        let writer = s.spawn(move || -> Result<(usize, usize)> {
            let (mut n, mut failed) = (0, 0);
            for row in rx {
                write_row(&mut file, &row)?;
                file.flush()?;
                n += 1;
                failed += usize::from(row.failed);
            }
            Ok((n, failed))
        });
        let run = execute(cfg, items, make_adapter, &skip, |row| {
            let _ = tx.lock().expect("sender lock").send(row);
        });
        drop(tx);
        let (written, failed) = writer.join().expect("writer thread")?;
        Ok::<_, Error>((written, failed, run))
    })?;
    run?;
    Ok(MatrixSummary {
        written,
        resumed: existing.len(),
        failed,
    })
}
