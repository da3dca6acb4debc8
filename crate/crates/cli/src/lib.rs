//! Command-line layer over the simulator core: config files, presets,
//! multi-seed experiment runs and comparison reports.

pub mod config;
pub mod presets;
pub mod runner;
pub mod svg;
