//! Group-wise target accuracy estimation under covariate shift from
//! importance-weight confidence intervals.
//!
//! The usual entry point is [`pipeline::run`], which scores both domains,
//! builds importance-weight bins and their intervals, and solves the
//! per-group weight selection for every candidate grouping temperature.

pub mod baselines;
pub mod ci;
pub mod diagnostics;
pub mod domain;
pub mod error;
pub mod estimate;
pub mod grouping;
pub mod io;
pub mod optimizer;
pub mod pipeline;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{Dataset, Domain, GaeConfig, PredictionRecord, Split};
