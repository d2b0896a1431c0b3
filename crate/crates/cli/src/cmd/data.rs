use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use garden_core::dataset::{
    filter_record, save_dataset, scale_image, synth_toy_range, toy_vocab, DatasetRecord, Example, FilterDecision,
    RawImageMeta, Style,
};
use garden_core::image::{png_dimensions, ImageTensor};
use garden_core::networks::Vocab;
use serde::{Deserialize, Serialize};

use crate::manifest::RUN_FILE;
use crate::{usage, Ctx};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const FILTER_REPORT: &str = "filter_report.json";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleArg {
    Paper,
    InkNight,
}

impl From<StyleArg> for Style {
    fn from(s: StyleArg) -> Style {
        match s {
            StyleArg::Paper => Style::Paper,
            StyleArg::InkNight => Style::InkNight,
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Dataset root to create.
    #[arg(long)]
    root: PathBuf,
    /// Number of toy records to synthesize.
    #[arg(long, required_unless_present = "ingest", conflicts_with = "ingest")]
    synth: Option<usize>,
    /// Index of the first toy record; disjoint ranges give disjoint splits.
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output image side in pixels.
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, value_enum, default_value_t = StyleArg::Paper)]
    style: StyleArg,
    /// Directory of candidate PNGs plus a `candidates.jsonl` listing.
    #[arg(long)]
    ingest: Option<PathBuf>,
    /// Candidate listing; defaults to `candidates.jsonl` inside the ingest directory.
    #[arg(long, requires = "ingest")]
    candidates: Option<PathBuf>,
}

/// One line of the ingest listing. A missing or empty caption and a missing
/// architecture flag count as absent.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Candidate {
    file_name: String,
    #[serde(default)]
    additional_feature: Option<String>,
    #[serde(default)]
    has_architecture: Option<bool>,
}

#[derive(Debug, Serialize)]
struct Settings {
    root: PathBuf,
    mode: &'static str,
    synth: Option<usize>,
    start: usize,
    seed: u64,
    side: usize,
    style: StyleArg,
    ingest: Option<PathBuf>,
    candidates: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Rejection {
    file_name: String,
    reason: &'static str,
}

#[derive(Debug, Serialize)]
struct FilterReport {
    candidates: usize,
    accepted: Vec<String>,
    rejected: Vec<Rejection>,
}

pub fn run(ctx: &Ctx, a: Args) -> Result<()> {
    if a.side == 0 {
        return Err(usage("--side must be positive"));
    }
    let root = ctx.path(&a.root);
    let ingest = a.ingest.as_ref().map(|p| ctx.path(p));
    let candidates = ingest
        .as_ref()
        .map(|src| a.candidates.as_ref().map(|c| ctx.path(c)).unwrap_or_else(|| src.join(CANDIDATES_FILE)));
    let settings = Settings {
        root: root.clone(),
        mode: if ingest.is_some() { "ingest" } else { "synth" },
        synth: a.synth,
        start: a.start,
        seed: a.seed,
        side: a.side,
        style: a.style,
        ingest: ingest.clone(),
        candidates: candidates.clone(),
    };
    let mut m = ctx.manifest("prepare-data").config(&settings, a.seed)?;

    let (examples, vocab, report) = match (&ingest, &candidates, a.synth) {
        (Some(src), Some(list), _) => {
            super::require_dir(src, "ingest directory")?;
            super::require_file(list, "candidate listing")?;
            let (examples, report) = ingest_candidates(src, list, a.side)?;
            m.input(list)?;
            for name in &report.accepted {
                m.input(&src.join(name))?;
            }
            let vocab = Vocab::build(examples.iter().map(|e| e.record.caption.as_str()));
            (examples, vocab, Some(report))
        }
        (_, _, Some(n)) => {
            if n == 0 {
                return Err(usage("--synth must be positive"));
            }
            let ex = synth_toy_range(a.start, n, a.seed, a.side, a.style.into())?;
            (ex, toy_vocab(), None)
        }
        _ => unreachable!("clap requires --synth or --ingest"),
    };

    for name in [garden_core::dataset::MANIFEST_FILE, garden_core::dataset::CURATION_FILE, VOCAB_FILE] {
        m.output(&root.join(name));
    }
    if report.is_some() {
        m.output(&root.join(FILTER_REPORT));
    }
    m.write(&root.join(RUN_FILE))?;

    save_dataset(&root, &examples)?;
    vocab.save(&root.join(VOCAB_FILE))?;
    if let Some(r) = &report {
        let text = serde_json::to_string_pretty(r)? + "\n";
        fs::write(root.join(FILTER_REPORT), text).context("writing filter report")?;
        println!(
            "{} of {} candidates accepted into {}",
            r.accepted.len(),
            r.candidates,
            root.display()
        );
    } else {
        println!("{} toy records written to {}", examples.len(), root.display());
    }
    Ok(())
}

fn ingest_candidates(src: &Path, list: &Path, side: usize) -> Result<(Vec<Example>, FilterReport)> {
    let text = fs::read_to_string(list).with_context(|| format!("reading {}", list.display()))?;
    let mut report = FilterReport {
        candidates: 0,
        accepted: Vec::new(),
        rejected: Vec::new(),
    };
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let c: Candidate =
            serde_json::from_str(line).map_err(|e| usage(format!("{}:{}: {e}", list.display(), i + 1)))?;
        if c.file_name.is_empty() || Path::new(&c.file_name).components().count() != 1 {
            return Err(usage(format!("{}:{}: file_name must be a bare file name", list.display(), i + 1)));
        }
        report.candidates += 1;
        let caption = c.additional_feature.unwrap_or_default().trim().to_string();
        let path = src.join(&c.file_name);
        let (w, h) = png_dimensions(&path)?;
        let meta = RawImageMeta {
            width: w as u32,
            height: h as u32,
            has_caption: !caption.is_empty(),
            has_architecture: c.has_architecture.unwrap_or(false),
        };
        match filter_record(&meta) {
            FilterDecision::Reject(r) => report.rejected.push(Rejection {
                file_name: c.file_name,
                reason: r.as_str(),
            }),
            FilterDecision::Accept => {
                let image = scale_image(&ImageTensor::load_png(&path)?, side)?;
                report.accepted.push(c.file_name.clone());
                examples.push(Example {
                    record: DatasetRecord::new(c.file_name, caption, true),
                    image,
                });
            }
        }
    }
    if examples.is_empty() {
        bail!("no candidate in {} passed the ingest filter", list.display());
    }
    Ok((examples, report))
}
