//! Experiment harness: configuration, the end-to-end pipeline, FLOP
//! estimates, and report emission for the merging toolkit.

pub mod config;
pub mod flops;
pub mod pipeline;
pub mod report;
