//! Append-only review label log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use reefpipe_core::tracker::ReviewLabel;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "tp")]
    TruePositive,
    #[serde(rename = "fp")]
    FalsePositive,
}

impl Verdict {
    pub fn review_label(self) -> ReviewLabel {
        match self {
            Verdict::TruePositive => ReviewLabel::TruePositive,
            Verdict::FalsePositive => ReviewLabel::FalsePositive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub track_id: u64,
    pub verdict: Verdict,
    pub reviewer: String,
    pub labeled_at_ms: i64,
}

/// `labels.jsonl`: one record per line, fsynced before `append` returns.
#[derive(Debug)]
pub struct LabelLog {
    path: PathBuf,
    file: File,
}

impl LabelLog {
    /// Open (creating if needed) and replay the log. A torn final line left
    /// by a crash mid-write is discarded and truncated away; damage anywhere
    /// else is an error.
    pub fn open(path: &Path) -> Result<(Self, Vec<LabelRecord>), ServiceError> {
        let io = |e| ServiceError::io(path, e);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| ServiceError::io(parent, e))?;
        }
        let text = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io(e)),
        };
        let mut records = Vec::new();
        let mut good_len = 0usize;
        let mut offset = 0usize;
        for (idx, line) in text.split_inclusive(|&b| b == b'\n').enumerate() {
            let complete = line.ends_with(b"\n");
            let body = line.strip_suffix(b"\n").unwrap_or(line);
            offset += line.len();
            if body.iter().all(u8::is_ascii_whitespace) {
                if complete {
                    good_len = offset;
                }
                continue;
            }
            match (serde_json::from_slice::<LabelRecord>(body), complete) {
                (Ok(r), true) => {
                    records.push(r);
                    good_len = offset;
                }
                (_, false) => {
                    warn!("{}: discarding torn trailing record", path.display());
                }
                (Err(e), true) => {
                    return Err(ServiceError::Corrupt(format!("{} line {}: {e}", path.display(), idx + 1)));
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if good_len < text.len() {
            file.set_len(good_len as u64).map_err(io)?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            records,
        ))
    }

    pub fn append(&mut self, rec: &LabelRecord) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(rec).expect("label serializes");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.sync_data())
            .map_err(|e| ServiceError::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
