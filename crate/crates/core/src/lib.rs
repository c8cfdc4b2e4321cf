//! Core model of the heterogeneous-cluster scheduler: cluster and software
//! descriptions, task lifecycle, runners, execution profiling, scheduling
//! and simulation, monitoring, and experiment packaging.

pub mod catalog;
pub mod classifiers;
pub mod cluster;
pub mod error;
pub mod executor;
pub mod monitoring;
pub mod packager;
pub mod profiler;
pub mod rng;
pub mod scheduler;
pub mod tasks;
pub mod workflow;

pub use error::{Error, Result};

use serde::de::DeserializeOwned;

/// Parses a JSON or YAML document. Text starting with `{` or `[` is tried
/// as JSON first.
pub(crate) fn parse_document<T: DeserializeOwned>(text: &str) -> Result<T> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        if let Ok(v) = serde_json::from_str(trimmed) {
            return Ok(v);
        }
    }
    serde_yaml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}
