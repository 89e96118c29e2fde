//! Operational shell: run configuration, the checkpoint container,
//! trainers, evaluation metrics, the schedule ablation, and the selftest
//! property suites.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod selftest;
pub mod train;
