//! Command-line front-end for nbmix: count-table ingestion, gene filtering,
//! mixture fitting, K selection, differential tests and simulation studies.
//!
//! Counts are used as given. Library-size normalization, if wanted, has to
//! happen before ingestion.

pub mod commands;
pub mod config;
pub mod error;
pub mod format;
pub mod ingest;

pub use commands::{cmd_fit, cmd_select_k, cmd_simulate, cmd_test, run, Outcome};
pub use config::{Command, RunConfig, SimulationConfig};
pub use error::{CliError, CliResult};
pub use ingest::{counts_tsv, filter_genes, ingest, ConditionEntry, ConditionMap};
