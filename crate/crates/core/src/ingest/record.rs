use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Frame, IngestError, Result};

/// One line of `metadata.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub frame_id: u64,
    pub timestamp_ms: i64,
    #[serde(default)]
    pub lat: Option<f64>,
    #[serde(default)]
    pub lon: Option<f64>,
    #[serde(default)]
    pub source_ref: Option<String>,
}

impl MetadataRecord {
    pub fn of(frame: &Frame) -> Self {
        Self {
            frame_id: frame.frame_id,
            timestamp_ms: frame.timestamp_ms,
            lat: frame.geo.map(|g| g.lat),
            lon: frame.geo.map(|g| g.lon),
            source_ref: Some(frame.source_ref.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrittenPaths {
    pub image: PathBuf,
    pub metadata: PathBuf,
}

/// File name of a frame image under `frames/`.
pub fn frame_file_name(frame_id: u64) -> String {
    format!("frame_{frame_id:06}.jpg")
}

/// Writes frames as `frames/frame_%06d.jpg` plus an appended
/// `metadata.jsonl` line per frame, mirroring the input corpus layout.
pub struct FrameRecordWriter {
    root: PathBuf,
    frames_dir: PathBuf,
    metadata_path: PathBuf,
    metadata: BufWriter<File>,
}

fn storage(path: &Path, e: impl std::fmt::Display) -> IngestError {
    IngestError::Storage {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl FrameRecordWriter {
    pub fn create(out_dir: &Path) -> Result<Self> {
        let frames_dir = out_dir.join("frames");
        fs::create_dir_all(&frames_dir).map_err(|e| storage(&frames_dir, e))?;
        let metadata_path = out_dir.join("metadata.jsonl");
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metadata_path)
            .map_err(|e| storage(&metadata_path, e))?;
        Ok(Self {
            root: out_dir.to_path_buf(),
            frames_dir,
            metadata_path,
            metadata: BufWriter::new(file),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, frame: &Frame) -> Result<WrittenPaths> {
        let image_path = self.frames_dir.join(frame_file_name(frame.frame_id));
        let mut out = BufWriter::new(File::create(&image_path).map_err(|e| storage(&image_path, e))?);
        let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, 92);
        frame
            .to_rgb_image()
            .write_with_encoder(enc)
            .map_err(|e| storage(&image_path, e))?;
        out.flush().map_err(|e| storage(&image_path, e))?;

        let line = serde_json::to_string(&MetadataRecord::of(frame)).expect("plain record serializes");
        writeln!(self.metadata, "{line}").map_err(|e| storage(&self.metadata_path, e))?;
        self.metadata.flush().map_err(|e| storage(&self.metadata_path, e))?;
        Ok(WrittenPaths {
            image: image_path,
            metadata: self.metadata_path.clone(),
        })
    }
}
