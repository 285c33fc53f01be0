//! Experiment configuration: flat `key = value` lines.
//!
//! ```text
//! # comment
//! adapter = toy              # toy | replay
//! adapter_seed = 7
//! benchmark = niah           # niah | items
//! niah_n = 102
//! niah_position = early      # repeat for several
//! niah_length = 150          # repeat for several
//! policy = lru               # repeat; `credit` and `:faithful` allowed
//! capacity = 13%             # repeat; absolute, percent or `full`
//! protection = bilateral:0.1 # repeat
//! regime = decode
//! seed = 0
//! ```
//!
//! List-valued keys are given once per element. Every problem found is
//! reported, one per line, with the line number and key.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::ProtectionConfig;
use crate::error::{Error, Result};
use crate::harness::{
    CapacitySpec, NeedlePosition, Regime, RegimeConfig, Strategy, ToyConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AdapterChoice {
    Toy(ToyConfig),
    Replay { trace: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BenchmarkSource {
    Niah {
        n_items: usize,
        positions: Vec<NeedlePosition>,
        lengths: Vec<usize>,
        seed: u64,
    },
    /// JSONL of `BenchItem`s.
    Items(PathBuf),
    /// Items reconstructed from the replay trace.
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub adapter: AdapterChoice,
    pub benchmark: BenchmarkSource,
    pub strategies: Vec<Strategy>,
    pub capacities: Vec<CapacitySpec>,
    pub protections: Vec<ProtectionConfig>,
    /// `capacity` is ignored; each cell sets its own.
    pub regime: RegimeConfig,
    pub out: Option<PathBuf>,
    pub seed: u64,
    /// Guard fractions for a protection sweep; 0 means no guard.
    pub rho: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            adapter: AdapterChoice::Toy(ToyConfig::default()),
            benchmark: BenchmarkSource::Niah {
                n_items: 102,
                positions: NeedlePosition::ALL.to_vec(),
                lengths: vec![150, 250],
                seed: 0,
            },
            strategies: Vec::new(),
            capacities: Vec::new(),
            protections: Vec::new(),
            regime: RegimeConfig::decode(1),
            out: None,
            seed: 0,
            rho: Vec::new(),
        }
    }
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

const KEYS: &[&str] = &[
    "adapter",
    "adapter_seed",
    "n_heads",
    "trace",
    "benchmark",
    "items",
    "niah_n",
    "niah_position",
    "niah_length",
    "niah_seed",
    "policy",
    "capacity",
    "protection",
    "regime",
    "tau",
    "max_new_tokens",
    "prompt_token_cap",
    "chunk_size",
    "out",
    "seed",
    "rho",
];

const LIST_KEYS: &[&str] = &[
    "niah_position",
    "niah_length",
    "policy",
    "capacity",
    "protection",
    "rho",
];

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        text.parse()
    }

    /// Relative paths are taken from `dir`.
    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let AdapterChoice::Replay { trace } = &mut self.adapter {
            fix(trace);
        }
        if let BenchmarkSource::Items(p) = &mut self.benchmark {
            fix(p);
        }
        if let Some(p) = &mut self.out {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.strategies.is_empty() {
            errs.push("field `policy`: at least one policy is required".to_string());
        }
        if self.capacities.is_empty() {
            errs.push("field `capacity`: at least one capacity is required".to_string());
        }
        if self.protections.is_empty() {
            errs.push("field `protection`: at least one protection is required".to_string());
        }
        if let Err(e) = self.regime.validate() {
            errs.push(format!("regime: {e}"));
        }
        if let BenchmarkSource::Trace = self.benchmark {
            if !matches!(self.adapter, AdapterChoice::Replay { .. }) {
                errs.push("field `benchmark`: `trace` needs `adapter = replay`".into());
            }
        }
        if self.rho.iter().any(|r| !(0.0..0.5).contains(r)) {
            errs.push("field `rho`: values must lie in [0, 0.5)".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("\n")))
        }
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut errs: Vec<String> = Vec::new();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    let key = k.trim();
                    if KEYS.contains(&key) {
                        entries.push(Entry {
                            line: i + 1,
                            key,
                            value: v.trim(),
                        });
                    } else {
                        errs.push(format!("line {}: unknown key `{key}`", i + 1));
                    }
                }
                None => errs.push(format!("line {}: expected `key = value`", i + 1)),
            }
        }
        for key in KEYS.iter().filter(|k| !LIST_KEYS.contains(k)) {
            let lines: Vec<usize> = entries.iter().filter(|e| e.key == *key).map(|e| e.line).collect();
            if lines.len() > 1 {
                errs.push(format!("field `{key}`: given more than once (lines {lines:?})"));
            }
        }

        let mut p = Parser { entries: &entries, errs: &mut errs };
        let mut cfg = ExperimentConfig::default();

        let n_heads = p.one::<usize>("n_heads").unwrap_or(4);
        let adapter_seed = p.one::<u64>("adapter_seed").unwrap_or(0);
        let adapter = p.raw("adapter").unwrap_or("toy").to_string();
        cfg.adapter = match adapter.as_str() {
            "toy" => AdapterChoice::Toy(ToyConfig {
                seed: adapter_seed,
                n_heads,
                ..ToyConfig::default()
            }),
            "replay" => match p.raw("trace") {
                Some(t) => AdapterChoice::Replay { trace: PathBuf::from(t) },
                None => {
                    p.errs.push("field `trace`: required when `adapter = replay`".into());
                    AdapterChoice::Replay { trace: PathBuf::new() }
                }
            },
            other => {
                p.errs.push(format!("field `adapter`: unknown adapter `{other}` (toy | replay)"));
                cfg.adapter
            }
        };

        cfg.seed = p.one("seed").unwrap_or(0);
        let benchmark = p.raw("benchmark").unwrap_or("niah").to_string();
        cfg.benchmark = match benchmark.as_str() {
            "niah" => {
                let positions = p.list::<NeedlePosition>("niah_position");
                let lengths = p.list::<usize>("niah_length");
                BenchmarkSource::Niah {
                    n_items: p.one("niah_n").unwrap_or(102),
                    positions: if positions.is_empty() { NeedlePosition::ALL.to_vec() } else { positions },
                    lengths: if lengths.is_empty() { vec![150, 250] } else { lengths },
                    seed: p.one("niah_seed").unwrap_or(cfg.seed),
                }
            }
            "items" => match p.raw("items") {
                Some(path) => BenchmarkSource::Items(PathBuf::from(path)),
                None => {
                    p.errs.push("field `items`: required when `benchmark = items`".into());
                    BenchmarkSource::Items(PathBuf::new())
                }
            },
            "trace" => BenchmarkSource::Trace,
            other => {
                p.errs.push(format!("field `benchmark`: unknown source `{other}` (niah | items | trace)"));
                cfg.benchmark
            }
        };

        cfg.strategies = p.list("policy");
        cfg.capacities = p.list("capacity");
        cfg.protections = p.list("protection");
        cfg.rho = p.list("rho");
        let regime: Regime = p.one("regime").unwrap_or(Regime::Decode);
        let base = RegimeConfig::decode(1);
        cfg.regime = RegimeConfig {
            regime,
            capacity: 1,
            tau: p.one("tau").unwrap_or(base.tau),
            max_new_tokens: p.one("max_new_tokens").unwrap_or(base.max_new_tokens),
            prompt_token_cap: p.one("prompt_token_cap").unwrap_or(base.prompt_token_cap),
            chunk_size: p.one("chunk_size"),
        };
        cfg.out = p.raw("out").map(PathBuf::from);

        if errs.is_empty() {
            cfg.validate()?;
            Ok(cfg)
        } else {
            Err(Error::Config(errs.join("\n")))
        }
    }
}

struct Parser<'a, 'b> {
    entries: &'a [Entry<'a>],
    errs: &'b mut Vec<String>,
}

impl Parser<'_, '_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.key == key).map(|e| e.value)
    }

    fn parse<T: FromStr>(&mut self, e: &Entry) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        match e.value.parse::<T>() {
            Ok(v) => Some(v),
            Err(err) => {
                self.errs.push(format!("line {}: field `{}`: {err}", e.line, e.key));
                None
            }
        }
    }

    fn one<T: FromStr>(&mut self, key: &str) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        let entries = self.entries;
        let e = entries.iter().find(|e| e.key == key)?;
        self.parse(e)
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Vec<T>
    where
        T::Err: std::fmt::Display,
    {
        let entries = self.entries;
        entries
            .iter()
            .filter(|e| e.key == key)
            .filter_map(|e| self.parse(e))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
        # toy matrix
        adapter = toy
        adapter_seed = 3
        niah_n = 12
        niah_position = early
        niah_position = late
        niah_length = 150
        policy = lru
        policy = snapkv:faithful
        policy = credit
        capacity = 13%
        capacity = 64
        protection = none
        protection = bilateral:0.1
        tau = 4
        seed = 9
    ";

    #[test]
    fn parses_lists_and_scalars() {
        let cfg: ExperimentConfig = SAMPLE.parse().unwrap();
        assert_eq!(cfg.strategies.len(), 3);
        assert_eq!(cfg.capacities, vec![CapacitySpec::Fraction(0.13), CapacitySpec::Absolute(64)]);
        assert_eq!(cfg.protections[1], ProtectionConfig::bilateral(0.1));
        assert_eq!(cfg.regime.tau, 4);
        assert_eq!(cfg.seed, 9);
        match cfg.benchmark {
            BenchmarkSource::Niah { n_items, positions, lengths, seed } => {
                assert_eq!((n_items, lengths, seed), (12, vec![150], 9));
                assert_eq!(positions, vec![NeedlePosition::Early, NeedlePosition::Late]);
            }
            other => panic!("{other:?}"),
        }
        match cfg.adapter {
            AdapterChoice::Toy(t) => assert_eq!(t.seed, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reports_every_bad_field() {
        let text = "policy = lru\npolicy = nope\ncapacity = -3\nprotection = none\ntau = x\nbogus = 1\ntau = 2\n";
        let msg = text.parse::<ExperimentConfig>().unwrap_err().to_string();
        assert!(msg.contains("line 2: field `policy`"), "{msg}");
        assert!(msg.contains("line 3: field `capacity`"), "{msg}");
        assert!(msg.contains("line 5: field `tau`"), "{msg}");
        assert!(msg.contains("line 6: unknown key `bogus`"), "{msg}");
        assert!(msg.contains("field `tau`: given more than once"), "{msg}");
    }

    #[test]
    fn missing_lists_fail_validation() {
        let msg = "seed = 1".parse::<ExperimentConfig>().unwrap_err().to_string();
        assert!(msg.contains("`policy`") && msg.contains("`capacity`"), "{msg}");
    }

    #[test]
    fn replay_needs_trace() {
        let text = "adapter = replay\nbenchmark = trace\npolicy = lru\ncapacity = 64\nprotection = none\n";
        let msg = text.parse::<ExperimentConfig>().unwrap_err().to_string();
        assert!(msg.contains("`trace`"), "{msg}");
    }
}
