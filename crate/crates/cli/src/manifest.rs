use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_FILE: &str = "run.json";

/// Record of one invocation, written before any other output so that a
/// crashed run still says what it was doing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub workdir: String,
    /// Every setting after defaults, config file and flags are merged.
    pub config: serde_json::Value,
    pub seed: u64,
    /// sha256 of each input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], workdir: &Path) -> Self {
        RunManifest {
            command: command.into(),
            argv: argv.to_vec(),
            workdir: workdir.display().to_string(),
            config: serde_json::Value::Null,
            seed: 0,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn config<C: Serialize>(mut self, config: &C, seed: u64) -> Result<Self> {
        self.config = serde_json::to_value(config)?;
        self.seed = seed;
        Ok(self)
    }

    /// Hashes `path`, or every file below it when it is a directory.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut files = Vec::new();
            walk(path, &mut files)?;
            for f in files {
                self.input(&f)?;
            }
            return Ok(());
        }
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), hex(&Sha256::digest(&bytes)));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Manifest location for a command whose output is a single file.
pub fn beside(out: &Path) -> PathBuf {
    out.with_extension(RUN_FILE)
}

fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, files)?;
        } else {
            files.push(p);
        }
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("abc.txt");
        fs::write(&f, "abc").unwrap();
        let mut m = RunManifest::new("x", &[], dir.path());
        m.input(dir.path()).unwrap();
        assert_eq!(
            m.inputs[&f.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn beside_swaps_extension() {
        assert_eq!(beside(Path::new("out/a.png")), PathBuf::from("out/a.run.json"));
    }
}
