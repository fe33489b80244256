//! Data ingestion, synthetic markets and experiment configuration.

mod config;
mod panel;
mod synth;

pub use config::{DataSection, Grid, ProblemSection, RunConfig};
pub use panel::{load_returns_csv, read_returns_csv, write_returns_csv};
pub use synth::{generate_synthetic, Regime, SyntheticSpec};
