//! Driver for the three-stage adaptation pipeline: continual pre-training,
//! instruction tuning and preference alignment, with evaluation, manual
//! evaluation and dataset construction alongside.

pub mod commands;
pub mod common;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use error::{CliError, Result};
pub use manifest::RunManifest;
pub use pipeline::{run_stage, PipelineConfig, Stage, StageOutcome};
