//! Batch pipeline, command line and REST service over `medex-core`.

pub mod config;
pub mod pipeline;
pub mod server;
pub mod synth;
pub mod train;

pub use config::PipelineConfig;
pub use pipeline::{process_batch, run_all, run_pipeline, Batch, BatchInput, Resources, RunReport, Stage};
