//! File formats, configuration and the experiment runner.

pub mod aggregate;
pub mod config;
pub mod matrix;
pub mod results;
pub mod trace;
