//! Experiment runner: training, sweeps, single-image transmission, the
//! emulator service and report aggregation.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod report;
