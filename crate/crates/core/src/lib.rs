//! KV-cache eviction laboratory.
//!
//! A deterministic simulator of globally capped, decode-time KV-cache
//! eviction. The cache is modeled as a set of logical token positions with
//! per-head attention accounting; eviction policies pick victims from the
//! positions not covered by the bilateral prefix/suffix guard. Around that
//! core sit a toy retrieval model and trace replay, synthetic
//! needle-in-a-haystack items, quality metrics, paired statistics and an
//! experiment-matrix runner that writes JSONL rows.

pub mod cache;
pub mod credit;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod policy;
pub mod seed;
pub mod stats;

pub use cache::{
    compute_protected_set, AttentionEvent, CacheState, EventKind, LogicalPosition, ProtectedSet,
    ProtectionConfig, ProtectionMode, SuffixMode,
};
pub use error::{Error, Result};
pub use policy::{PolicyId, PolicySpec, Variant, VictimSelection};
