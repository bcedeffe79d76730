//! One module per subcommand. Each takes the merged configuration and the
//! created output directory and returns the process exit code.

pub mod diagnose;
pub mod generate;
pub mod nll;
pub mod simulate;
pub mod sinkhorn;
pub mod train;

use crate::error::{internal, Result};
use serde::Serialize;
use std::path::Path;

/// Write a pretty-printed JSON artifact with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(internal)?;
    text.push('\n');
    std::fs::write(path, text).map_err(internal)
}
