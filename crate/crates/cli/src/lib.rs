//! Batch orchestration for the qqnet analysis pipeline.

pub mod config;
pub mod pipeline;
pub mod report;
