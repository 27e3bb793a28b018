//! Command-line pipeline: train, estimate traces, plan bit widths, quantize,
//! fine-tune and report, with every stage reading and writing files in one
//! output directory.

pub mod analyze;
pub mod cli;
pub mod config;
pub mod error;
pub mod report;
pub mod stages;
