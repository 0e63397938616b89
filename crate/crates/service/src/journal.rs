//! Append-only JSON-Lines log of annotation records.
//!
//! Every append is written and synced to disk before it returns, so a record
//! that has been acknowledged survives a crash. A torn final line (a write
//! that never completed, hence was never acknowledged) is cut off on open.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use softcbm_core::SoftGroupAnnotation;

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    /// Client-supplied uuid; unique within the log.
    pub record_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub annotation: SoftGroupAnnotation,
    /// Server receive time, milliseconds since the Unix epoch.
    pub received_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appended {
    Written,
    Duplicate,
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
    seen: HashSet<String>,
}

impl Journal {
    /// Opens (or creates) the log and returns the records already in it.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<AnnotationRecord>)> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut text = String::new();
        file.read_to_string(&mut text)?;

        let complete = text.rfind('\n').map_or(0, |i| i + 1);
        if complete < text.len() {
            log::warn!("{}: dropping {} bytes of an unfinished record", path.display(), text.len() - complete);
            file.set_len(complete as u64)?;
            file.seek(SeekFrom::End(0))?;
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text[..complete].lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: AnnotationRecord = serde_json::from_str(line)
                .map_err(|e| ServiceError::BadRequest(format!("{} line {}: {e}", path.display(), i + 1)))?;
            seen.insert(rec.record_id.clone());
            records.push(rec);
        }
        Ok((Self { path, file, seen }, records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, record_id: &str) -> bool {
        self.seen.contains(record_id)
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    /// Appends one line and syncs it, unless the record id is already present.
    pub fn append(&mut self, rec: &AnnotationRecord) -> Result<Appended> {
        if self.seen.contains(&rec.record_id) {
            return Ok(Appended::Duplicate);
        }
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        self.seen.insert(rec.record_id.clone());
        Ok(Appended::Written)
    }
}
