//! Command-line front end and file formats for the brainood pipeline:
//! dataset generation, site-holdout splits, training, evaluation,
//! cross-validation, and edge-score interpretation.
//!
//! The math lives in `brainood-core`; this crate owns everything that
//! touches a filesystem or a terminal.

pub mod commands;
pub mod config;
pub mod io;
pub mod selftest;
