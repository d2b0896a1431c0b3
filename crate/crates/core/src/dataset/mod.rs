//! Image-caption records, ingest filtering, manifests and the procedural
//! toy corpus.
//!
//! On disk a dataset root holds the PNG images, `metadata.jsonl` (one
//! `{"file_name": ..., "additional_feature": ...}` object per line, the
//! layout expected by image-folder training pipelines) and a
//! `curation.jsonl` sidecar carrying the manual architecture flag.

mod manifest;
mod scale;
mod synth;

pub use manifest::{
    format_manifest_line, read_curation, read_manifest, write_curation, write_manifest, CURATION_FILE, MANIFEST_FILE,
};
pub use scale::scale_image;
pub use synth::{
    caption_for, render_scene, sample_scene, synth_toy_dataset, synth_toy_range, toy_vocab, Element, ElementProbabilities, Placed, Placement, SceneSpec,
    Style, ELEMENTS,
};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Minimum pixel count for ingested paintings (inclusive).
pub const MIN_PIXELS: u64 = 6_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub file_name: String,
    pub caption: String,
    pub has_architecture: bool,
}

impl DatasetRecord {
    pub fn new(file_name: impl Into<String>, caption: impl Into<String>, has_architecture: bool) -> Self {
        DatasetRecord {
            file_name: file_name.into(),
            caption: caption.into(),
            has_architecture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.file_name.is_empty() {
            return Err(Error::Config("record with empty file_name".into()));
        }
        if self.caption.trim().is_empty() {
            return Err(Error::Config(format!("record `{}` has an empty caption", self.file_name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawImageMeta {
    pub width: u32,
    pub height: u32,
    pub has_caption: bool,
    pub has_architecture: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    Resolution,
    MissingCaption,
    MissingArchitecture,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Resolution => "resolution",
            RejectReason::MissingCaption => "missing_caption",
            RejectReason::MissingArchitecture => "missing_architecture",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Accept,
    Reject(RejectReason),
}

/// Ingest rule: enough pixels, a caption, and a clear architectural element.
/// Rules are checked in that order and the first failure is reported.
pub fn filter_record(meta: &RawImageMeta) -> FilterDecision {
    let pixels = meta.width as u64 * meta.height as u64;
    if pixels < MIN_PIXELS {
        FilterDecision::Reject(RejectReason::Resolution)
    } else if !meta.has_caption {
        FilterDecision::Reject(RejectReason::MissingCaption)
    } else if !meta.has_architecture {
        FilterDecision::Reject(RejectReason::MissingArchitecture)
    } else {
        FilterDecision::Accept
    }
}

/// One loaded training pair.
#[derive(Debug, Clone)]
pub struct Example {
    pub record: DatasetRecord,
    pub image: ImageTensor,
}

/// Loads manifest, curation flags and images from a dataset root.
pub fn load_dataset(root: &Path) -> Result<Vec<Example>> {
    let mut records = read_manifest(&root.join(MANIFEST_FILE))?;
    let curation_path = root.join(CURATION_FILE);
    if curation_path.exists() {
        let flags = read_curation(&curation_path)?;
        for r in &mut records {
            r.has_architecture = flags.get(&r.file_name).copied().unwrap_or(false);
        }
    }
    records
        .into_iter()
        .map(|record| {
            let image = ImageTensor::load_png(&root.join(&record.file_name))?;
            Ok(Example { record, image })
        })
        .collect()
}

/// Writes images, manifest and curation sidecar under `root`.
pub fn save_dataset(root: &Path, examples: &[Example]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for ex in examples {
        ex.image.save_png(&root.join(&ex.record.file_name))?;
    }
    let records: Vec<DatasetRecord> = examples.iter().map(|e| e.record.clone()).collect();
    write_manifest(&root.join(MANIFEST_FILE), &records)?;
    write_curation(&root.join(CURATION_FILE), &records)
}

/// Seeded shuffle into `(train, held_out)` with `train_fraction` of items
/// (rounded down, at least one held out when there are two or more items).
pub fn split_train_val<T: Clone>(items: &[T], seed: u64, train_fraction: f64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_train = (items.len() as f64 * train_fraction).floor() as usize;
    if items.len() >= 2 {
        n_train = n_train.min(items.len() - 1);
    }
    let train = idx[..n_train].iter().map(|&i| items[i].clone()).collect();
    let val = idx[n_train..].iter().map(|&i| items[i].clone()).collect();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(width: u32, height: u32, has_caption: bool, has_architecture: bool) -> RawImageMeta {
        RawImageMeta {
            width,
            height,
            has_caption,
            has_architecture,
        }
    }

    #[test]
    fn filter_threshold_is_inclusive() {
        assert_eq!(filter_record(&meta(3000, 2000, true, true)), FilterDecision::Accept);
        assert_eq!(
            filter_record(&meta(2449, 2449, true, true)),
            FilterDecision::Reject(RejectReason::Resolution)
        );
        assert_eq!(
            filter_record(&meta(4000, 3000, false, true)),
            FilterDecision::Reject(RejectReason::MissingCaption)
        );
        assert_eq!(
            filter_record(&meta(4000, 3000, true, false)),
            FilterDecision::Reject(RejectReason::MissingArchitecture)
        );
    }

    #[test]
    fn first_failing_rule_wins() {
        assert_eq!(
            filter_record(&meta(10, 10, false, false)),
            FilterDecision::Reject(RejectReason::Resolution)
        );
        assert_eq!(
            filter_record(&meta(6000, 1000, false, false)),
            FilterDecision::Reject(RejectReason::MissingCaption)
        );
        assert_eq!(RejectReason::MissingCaption.as_str(), "missing_caption");
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let items: Vec<u32> = (0..50).collect();
        let (a, b) = split_train_val(&items, 3, 0.9);
        let (a2, b2) = split_train_val(&items, 3, 0.9);
        assert_eq!((a.len(), b.len()), (45, 5));
        assert_eq!((a.clone(), b.clone()), (a2, b2));
        assert!(a.iter().all(|x| !b.contains(x)));
    }
}
