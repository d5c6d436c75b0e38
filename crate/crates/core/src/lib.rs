//! Benchmark and instruction-curation harness for ophthalmology language models.

pub mod corpus;
pub mod curation;
pub mod extraction;
pub mod gateway;
pub mod humaneval;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod util;
