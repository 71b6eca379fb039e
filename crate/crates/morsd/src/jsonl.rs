//! JSONL reading/writing with an optional run-header line and atomic file replacement.
//!
//! Stage output files start with a single header object `{"morsd_header": {...}}`
//! recording the seed; readers skip it transparently, so the remaining lines are
//! one record per line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First line of every stage output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub stage: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    morsd_header: RunHeader,
}

impl RunHeader {
    pub fn new(stage: &str, seed: u64) -> Self {
        RunHeader { stage: stage.to_string(), seed }
    }
}

/// Reads all records from a JSONL file, skipping a leading header line if present.
/// Malformed lines report their 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<RunHeader>, Vec<T>)> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let reader = BufReader::new(file);
    let mut header = None;
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 {
            if let Ok(h) = serde_json::from_str::<HeaderLine>(&line) {
                header = Some(h.morsd_header);
                continue;
            }
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        records.push(record);
    }
    Ok((header, records))
}

/// Serializes records one per line. A header, when given, becomes the first line.
pub fn write_jsonl<T: Serialize, W: Write>(
    mut out: W,
    header: Option<&RunHeader>,
    records: impl IntoIterator<Item = T>,
) -> Result<()> {
    if let Some(h) = header {
        let line = serde_json::to_string(&HeaderLine { morsd_header: h.clone() })
            .expect("header serialization cannot fail");
        writeln!(out, "{line}")?;
    }
    for record in records {
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::InvalidConfig(format!("serialization failed: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Writes a whole file atomically: content goes to `<path>.tmp`, then a rename
/// replaces the target. An interrupted write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, write_fn: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let file = fs::File::create(&tmp)?;
        let mut writer = BufWriter::new(file);
        write_fn(&mut writer)?;
        writer.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Atomic variant of [`write_jsonl`] writing straight to a path.
pub fn write_jsonl_atomic<T: Serialize>(
    path: &Path,
    header: Option<&RunHeader>,
    records: &[T],
) -> Result<()> {
    write_atomic(path, |out| write_jsonl(out, header, records.iter()))
}

fn tmp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}
