use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::DatasetRecord;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "metadata.jsonl";
pub const CURATION_FILE: &str = "curation.jsonl";

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    file_name: String,
    additional_feature: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CurationLine {
    file_name: String,
    has_architecture: bool,
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// One manifest line, without the trailing newline.
pub fn format_manifest_line(record: &DatasetRecord) -> String {
    format!(
        "{{\"file_name\": {}, \"additional_feature\": {}}}",
        json_str(&record.file_name),
        json_str(&record.caption)
    )
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut out = String::new();
    for line in lines {
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn check_unique<'a>(names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for name in names {
        if !seen.insert(name) {
            return Err(Error::Duplicate(format!("file_name `{name}`")));
        }
    }
    Ok(())
}

pub fn write_manifest(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    check_unique(records.iter().map(|r| r.file_name.as_str()))?;
    write_lines(path, records.iter().map(format_manifest_line))
}

/// Reads a manifest; curation flags default to `true` until a sidecar says
/// otherwise.
pub fn read_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(parsed.file_name.clone()) {
            return Err(Error::Duplicate(format!("file_name `{}` (line {})", parsed.file_name, i + 1)));
        }
        let record = DatasetRecord::new(parsed.file_name, parsed.additional_feature, true);
        record.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_curation(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    check_unique(records.iter().map(|r| r.file_name.as_str()))?;
    write_lines(
        path,
        records.iter().map(|r| {
            format!(
                "{{\"file_name\": {}, \"has_architecture\": {}}}",
                json_str(&r.file_name),
                r.has_architecture
            )
        }),
    )
}

pub fn read_curation(path: &Path) -> Result<HashMap<String, bool>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut flags = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CurationLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if flags.insert(parsed.file_name.clone(), parsed.has_architecture).is_some() {
            return Err(Error::Duplicate(format!("file_name `{}` (line {})", parsed.file_name, i + 1)));
        }
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "A figure reclines on a couch in the pavilion, whilst the figure in the boat plays on a flute and dangles his legs in the water. ";

    #[test]
    fn sample_record_round_trips_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let rec = DatasetRecord::new("000914N000000000.png", SAMPLE, true);
        write_manifest(&path, std::slice::from_ref(&rec)).unwrap();
        let bytes = fs::read(&path).unwrap();
        let expected = format!("{{\"file_name\": \"000914N000000000.png\", \"additional_feature\": \"{SAMPLE}\"}}\n");
        assert_eq!(String::from_utf8(bytes.clone()).unwrap(), expected);
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, vec![rec]);
        write_manifest(&path, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        write_manifest(&path, &[]).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(read_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        fs::write(
            &path,
            "{\"file_name\": \"a.png\", \"additional_feature\": \"ok\"}\n{\"file_name\": \"b.png\"\n",
        )
        .unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicates_are_rejected_both_ways() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let recs = vec![DatasetRecord::new("a.png", "x", true), DatasetRecord::new("a.png", "y", true)];
        assert!(matches!(write_manifest(&path, &recs), Err(Error::Duplicate(_))));
        fs::write(
            &path,
            "{\"file_name\": \"a.png\", \"additional_feature\": \"x\"}\n{\"file_name\": \"a.png\", \"additional_feature\": \"y\"}\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Duplicate(_))));
    }

    #[test]
    fn blank_captions_are_rejected_at_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        fs::write(&path, "{\"file_name\": \"a.png\", \"additional_feature\": \"   \"}\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn curation_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(CURATION_FILE);
        let recs = vec![DatasetRecord::new("a.png", "x", true), DatasetRecord::new("b.png", "y", false)];
        write_curation(&path, &recs).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"file_name\": \"a.png\", \"has_architecture\": true}\n{\"file_name\": \"b.png\", \"has_architecture\": false}\n"
        );
        let flags = read_curation(&path).unwrap();
        assert!(flags["a.png"]);
        assert!(!flags["b.png"]);
    }
}
