//! Experiment harness: synthetic data, training loops, evaluation and reports.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dvc;
pub mod features;
pub mod qa;
pub mod report;
pub mod synth;
