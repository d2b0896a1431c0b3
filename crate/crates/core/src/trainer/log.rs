use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const LOSS_LOG_FILE: &str = "loss.csv";
const HEADER: &str = "step,loss,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f32,
    pub wall_ms: u64,
}

/// Append-only `step,loss,wall_ms` CSV.
pub struct LossLog {
    path: PathBuf,
    file: File,
    last_step: u64,
}

impl LossLog {
    /// Starts a new log, or when resuming keeps the rows up to
    /// `keep_through` and appends after them.
    pub fn open(path: &Path, keep_through: Option<u64>) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut kept = Vec::new();
        if let Some(limit) = keep_through {
            if path.exists() {
                kept = read_loss_log(path)?.into_iter().filter(|r| r.step <= limit).collect();
            }
            if kept.last().map_or(0, |r| r.step) != limit {
                return Err(Error::State(format!(
                    "{} does not cover steps 1..={limit} of the resumed run",
                    path.display()
                )));
            }
        }
        let mut text = format!("{HEADER}\n");
        for r in &kept {
            text.push_str(&format_row(r));
        }
        fs::write(path, text).map_err(io)?;
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        Ok(LossLog {
            path: path.to_path_buf(),
            file,
            last_step: keep_through.unwrap_or(0),
        })
    }

    pub fn append(&mut self, r: LossRecord) -> Result<()> {
        if r.step <= self.last_step {
            return Err(Error::State(format!("loss log step {} after {}", r.step, self.last_step)));
        }
        self.file
            .write_all(format_row(&r).as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.last_step = r.step;
        Ok(())
    }
}

fn format_row(r: &LossRecord) -> String {
    format!("{},{},{}\n", r.step, r.loss, r.wall_ms)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let bad = |m: &str| Error::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(bad("expected 3 columns"));
        }
        out.push(LossRecord {
            step: cols[0].parse().map_err(|_| bad("bad step"))?,
            loss: cols[1].parse().map_err(|_| bad("bad loss"))?,
            wall_ms: cols[2].parse().map_err(|_| bad("bad wall_ms"))?,
        });
    }
    Ok(out)
}
