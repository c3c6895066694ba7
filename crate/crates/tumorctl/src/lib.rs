//! Configuration, file formats and the command-line front end for
//! `tumorctl-core`.

pub mod cli;
pub mod config;
pub mod run;
pub mod snapshot;
pub mod table;
