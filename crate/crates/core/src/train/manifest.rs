//! Run manifests. Metadata lines are comments, so a manifest written for a
//! training run is itself a valid config.

use std::fs;
use std::path::Path;

use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// `command` is the full invocation; `config` is resolved `key = value` text.
pub fn manifest_text(command: &str, config: &str) -> String {
    format!(
        "# partialnet run manifest\n# command: {command}\n# version: {}\n# threads: 1\n{config}",
        env!("CARGO_PKG_VERSION")
    )
}

pub fn write_manifest(dir: &Path, command: &str, config: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), manifest_text(command, config))?;
    Ok(())
}
