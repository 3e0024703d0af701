//! Config-driven experiments: languages, a shared base model, per-seed
//! adaptation runs and arithmetic, evaluation and reporting.

mod config;
mod pipeline;
mod report;

pub use config::*;
pub use pipeline::*;
pub use report::*;
