use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use kvguard::harness::{gen_niah, NeedlePosition};
use kvguard::io::aggregate::{aggregate, sweep_protection, AggregateOptions};
use kvguard::io::config::ExperimentConfig;
use kvguard::io::matrix::{load_items, run_matrix, AdapterFactory};
use kvguard::io::results::{read_rows_file, write_row, ResultRow};
use kvguard::io::trace::{read_trace_file, validate_records};
use kvguard::stats::{
    bootstrap_ci, exact_sign_test, mean, tost_equivalence, wilcoxon_signed_rank, PairedSample,
    DEFAULT_RESAMPLES, DEFAULT_TOST_MARGIN,
};

/// KV-cache eviction experiments with bilateral protection.
#[derive(Parser)]
#[command(name = "kvguard", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment matrix, appending rows to the output file.
    Run(RunArgs),
    /// Run one policy at one capacity across the configured `rho` values.
    Sweep(RunArgs),
    /// Write synthetic needle-in-a-haystack items as JSONL.
    NiahGen(NiahArgs),
    /// Summarize result rows.
    Aggregate(AggregateArgs),
    /// Paired tests between two conditions.
    Stats(StatsArgs),
    /// Check a trace file against the trace format.
    TraceValidate { trace: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NiahArgs {
    #[arg(long, default_value_t = 63)]
    n: usize,
    /// Repeat for several; default all three.
    #[arg(long = "position")]
    positions: Vec<NeedlePosition>,
    /// Context length in words; repeat for several.
    #[arg(long = "length", required = true)]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1920)]
    prompt_token_cap: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AggregateArgs {
    rows: PathBuf,
    #[arg(long)]
    by_domain: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
    /// Emit JSON instead of a text table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct StatsArgs {
    rows: PathBuf,
    /// Cell string of condition A.
    #[arg(long)]
    a: String,
    /// Cell string of condition B.
    #[arg(long)]
    b: String,
    /// token_f1 or rouge_l_f1.
    #[arg(long, default_value = "token_f1")]
    metric: String,
    #[arg(long, default_value_t = DEFAULT_TOST_MARGIN)]
    margin: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::NiahGen(a) => niah_gen(a),
        Command::Aggregate(a) => aggregate_cmd(a),
        Command::Stats(a) => stats(a),
        Command::TraceValidate { trace } => {
            let records = read_trace_file(&trace)?;
            let summary = validate_records(&records)?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_config(a: &RunArgs) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::from_file(&a.config)?;
    let dir = a.config.parent().unwrap_or(Path::new("."));
    cfg.resolve_paths(dir);
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let out = a
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .context("no output path: set `out` in the config or pass --out")?;
    Ok((cfg, out))
}

fn run(a: RunArgs) -> anyhow::Result<ExitCode> {
    let (cfg, out) = load_config(&a)?;
    let summary = run_matrix(&cfg, &out)?;
    eprintln!(
        "{} rows written, {} already present, {} failed -> {}",
        summary.written,
        summary.resumed,
        summary.failed,
        out.display()
    );
    Ok(if summary.failed > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn sweep(a: RunArgs) -> anyhow::Result<ExitCode> {
    let (cfg, out) = load_config(&a)?;
    let factory = AdapterFactory::from_config(&cfg)?;
    let items = load_items(&cfg, &factory)?;
    let (rows, table) = sweep_protection(&cfg, &items, || factory.make())?;
    let mut w = BufWriter::new(File::create(&out).with_context(|| out.display().to_string())?);
    for r in &rows {
        write_row(&mut w, r)?;
    }
    w.flush()?;
    print!("{}", table.render());
    Ok(if rows.iter().any(|r| r.failed) { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn niah_gen(a: NiahArgs) -> anyhow::Result<ExitCode> {
    let positions = if a.positions.is_empty() {
        NeedlePosition::ALL.to_vec()
    } else {
        a.positions
    };
    let items = gen_niah(a.n, &positions, &a.lengths, a.seed)?;
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| a.out.display().to_string())?);
    for it in &items {
        serde_json::to_writer(&mut w, &it.to_bench_item(a.prompt_token_cap)?)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    eprintln!("{} items -> {}", items.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn aggregate_cmd(a: AggregateArgs) -> anyhow::Result<ExitCode> {
    let rows = read_rows_file(&a.rows)?;
    let opts = AggregateOptions {
        by_domain: a.by_domain,
        resamples: a.resamples,
        seed: a.seed,
        ..AggregateOptions::default()
    };
    let table = aggregate(&rows, &opts)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&table)?);
    } else {
        print!("{}", table.render());
    }
    Ok(ExitCode::SUCCESS)
}

fn stats(a: StatsArgs) -> anyhow::Result<ExitCode> {
    let rows = read_rows_file(&a.rows)?;
    let metric = |r: &ResultRow| -> anyhow::Result<f64> {
        Ok(match a.metric.as_str() {
            "token_f1" => r.token_f1,
            "rouge_l_f1" => r.rouge_l_f1,
            other => bail!("unknown metric `{other}` (token_f1 | rouge_l_f1)"),
        })
    };
    let scores = |cell: &str| -> anyhow::Result<BTreeMap<String, f64>> {
        let mut m = BTreeMap::new();
        for r in rows.iter().filter(|r| r.cell == cell && !r.failed) {
            m.insert(r.item_id.clone(), metric(r)?);
        }
        if m.is_empty() {
            bail!("no rows for condition `{cell}`");
        }
        Ok(m)
    };
    let pair = PairedSample::from_maps(&scores(&a.a)?, &scores(&a.b)?)?;
    let diffs = pair.diffs();
    let report = serde_json::json!({
        "a": a.a,
        "b": a.b,
        "metric": a.metric,
        "n": diffs.len(),
        "mean_diff": mean(&diffs),
        "bootstrap_ci": bootstrap_ci(&diffs, DEFAULT_RESAMPLES, 0.95, a.seed)?,
        "wilcoxon": wilcoxon_signed_rank(&diffs),
        "sign": exact_sign_test(&diffs),
        "tost": tost_equivalence(&diffs, a.margin).ok(),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}
