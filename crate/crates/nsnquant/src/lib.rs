//! File formats, configuration, reports, simulation and the invariant
//! registry for the `nsnquant` command-line tool.

pub mod commands;
pub mod config;
pub mod formats;
pub mod report;
pub mod simulate;
pub mod verify;
