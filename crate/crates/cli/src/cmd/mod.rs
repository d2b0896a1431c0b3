pub mod data;
pub mod eval;
pub mod generate;
pub mod panorama;
pub mod train;

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

/// Reads non-empty, trimmed lines, skipping `#` comments.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(crate::usage(format!("{what} `{}` does not exist", path.display())))
    }
}

pub fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(crate::usage(format!("{what} `{}` is not a directory", path.display())))
    }
}
