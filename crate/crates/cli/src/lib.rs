//! Command-line experiments: configuration, cohort CSV I/O, reports.

pub mod commands;
pub mod config;
pub mod io;
pub mod plot;
