//! Synthetic data, training orchestration, enhancement runs, evaluation and
//! reports.

pub mod commands;
pub mod config;
pub mod data;
pub mod enhance;
pub mod imageio;
pub mod pipeline;
pub mod report;
pub mod seeds;
pub mod synth;
