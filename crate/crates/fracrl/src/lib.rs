//! File formats, UCI diabetes-record analysis, experiment checkpointing and
//! the `fracrl` command line, built on `fracrl-core`.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod experiment;
pub mod formats;
