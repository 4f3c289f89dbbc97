//! Command implementations behind the `vdiff` binary.

pub mod commands;
pub mod config;
pub mod ppm;

pub use config::RunConfig;

use serde::Serialize;

/// One JSON object per line.
pub fn json_line<T: Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string(value)?)
}
