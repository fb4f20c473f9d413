//! Command-line front end for the `wicm` specification tests: CSV
//! ingestion, single tests, simulation studies and run manifests.

pub mod commands;
pub mod error;
pub mod ingest;
pub mod manifest;

pub use commands::{run, Cli, Command};
pub use error::CliError;
pub use ingest::{ingest_csv, read_csv, write_csv, IngestError, Table};
pub use manifest::RunManifest;
