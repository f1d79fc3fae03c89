//! Curated archive export.
//!
//! Layout under the destination:
//!
//! ```text
//! frames/frame_NNNNNN.jpg   frames referenced by exported tracks
//! metadata.jsonl            their metadata records
//! tracks.jsonl              exported tracks with current review labels
//! labels.jsonl              label history of exported tracks
//! manifest.json             counts, config echo and sha256 per file
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::warn;
use reefpipe_core::pipeline::write_tracks_jsonl;
use reefpipe_core::tracker::{ReviewLabel, Track};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::store::{RecordedFrames, TrackStore};
use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Include {
    All,
    /// Only tracks whose current verdict is true positive.
    LabeledOnly,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveCounts {
    pub tracks: usize,
    pub labeled: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub export_time_ms: i64,
    pub include: Include,
    pub config: serde_json::Value,
    pub counts: ArchiveCounts,
    /// Relative path to lowercase hex sha256.
    pub files: BTreeMap<String, String>,
}

fn export_err(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Export(format!("{}: {e}", path.display()))
}

fn sha256_file(path: &Path) -> Result<String, ServiceError> {
    let bytes = std::fs::read(path).map_err(|e| export_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Metadata lines of the recording keyed by frame id; the last record for
/// an id wins.
fn metadata_lines(record_dir: &Path) -> BTreeMap<u64, String> {
    let path = record_dir.join("metadata.jsonl");
    let Ok(text) = std::fs::read_to_string(&path) else {
        return BTreeMap::new();
    };
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let id = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("frame_id").and_then(|x| x.as_u64()));
        match id {
            Some(id) => {
                out.insert(id, line.to_string());
            }
            None if line.trim().is_empty() => {}
            None => warn!("{}: skipping unreadable metadata line", path.display()),
        }
    }
    out
}

/// Write the archive to `dest`, which must be absent or an empty directory.
/// Output is staged next to `dest` and moved into place at the end, so a
/// failure leaves nothing behind.
pub fn export_archive(store: &TrackStore, dest: &Path, include: Include) -> Result<ArchiveManifest, ServiceError> {
    if dest.exists() {
        let empty = std::fs::read_dir(dest)
            .map_err(|e| export_err(dest, e))?
            .next()
            .is_none();
        if !empty {
            return Err(export_err(dest, "destination exists and is not empty"));
        }
    }
    let parent = dest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    std::fs::create_dir_all(&parent).map_err(|e| export_err(&parent, e))?;
    let name = dest
        .file_name()
        .ok_or_else(|| export_err(dest, "destination has no file name"))?
        .to_string_lossy()
        .into_owned();
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&staging);

    let result = write_staged(store, &staging, include).and_then(|m| {
        if dest.exists() {
            std::fs::remove_dir(dest).map_err(|e| export_err(dest, e))?;
        }
        std::fs::rename(&staging, dest).map_err(|e| export_err(dest, e))?;
        Ok(m)
    });
    if result.is_err() {
        let _ = std::fs::remove_dir_all(&staging);
    }
    result
}

fn write_staged(store: &TrackStore, root: &Path, include: Include) -> Result<ArchiveManifest, ServiceError> {
    std::fs::create_dir_all(root.join("frames")).map_err(|e| export_err(root, e))?;
    let tracks: Vec<Track> = store
        .tracks()
        .into_iter()
        .filter(|t| include == Include::All || t.review_label == ReviewLabel::TruePositive)
        .map(|t| (*t).clone())
        .collect();
    let ids: BTreeSet<u64> = tracks.iter().map(|t| t.track_id).collect();
    let frame_ids: BTreeSet<u64> = tracks.iter().flat_map(|t| t.points.iter().map(|p| p.frame_id)).collect();
    let mut files: BTreeMap<String, String> = BTreeMap::new();

    let mut frames_copied = 0usize;
    let mut meta_out = Vec::new();
    if let Some(rec_dir) = store.record_dir() {
        let recorded = RecordedFrames::new(rec_dir);
        let meta = metadata_lines(rec_dir);
        for &fid in &frame_ids {
            let src = recorded.path_of(fid);
            if !src.exists() {
                warn!("frame {fid} was not recorded; omitted from archive");
                continue;
            }
            let rel = format!("frames/{}", reefpipe_core::ingest::frame_file_name(fid));
            let to = root.join(&rel);
            std::fs::copy(&src, &to).map_err(|e| export_err(&to, e))?;
            files.insert(rel, sha256_file(&to)?);
            frames_copied += 1;
            if let Some(line) = meta.get(&fid) {
                meta_out.extend_from_slice(line.as_bytes());
                meta_out.push(b'\n');
            }
        }
    } else if !frame_ids.is_empty() {
        warn!("no recording directory; archive holds no frames");
    }

    let write = |rel: &str, bytes: &[u8]| -> Result<PathBuf, ServiceError> {
        let p = root.join(rel);
        let mut f = std::fs::File::create(&p).map_err(|e| export_err(&p, e))?;
        f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| export_err(&p, e))?;
        Ok(p)
    };

    let p = write("metadata.jsonl", &meta_out)?;
    files.insert("metadata.jsonl".into(), sha256_file(&p)?);

    let p = root.join("tracks.jsonl");
    write_tracks_jsonl(&p, &tracks).map_err(|e| export_err(&p, e))?;
    files.insert("tracks.jsonl".into(), sha256_file(&p)?);

    let mut labels = Vec::new();
    for r in store.label_history().iter().filter(|r| ids.contains(&r.track_id)) {
        labels.extend(serde_json::to_vec(r).expect("label serializes"));
        labels.push(b'\n');
    }
    let p = write("labels.jsonl", &labels)?;
    files.insert("labels.jsonl".into(), sha256_file(&p)?);

    let manifest = ArchiveManifest {
        export_time_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0),
        include,
        config: store.options().config.clone(),
        counts: ArchiveCounts {
            tracks: tracks.len(),
            labeled: tracks.iter().filter(|t| t.review_label != ReviewLabel::Unreviewed).count(),
            frames: frames_copied,
        },
        files,
    };
    write("manifest.json", &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
    Ok(manifest)
}

/// Check every file listed in a manifest against its hash.
pub fn verify_archive(dir: &Path) -> Result<ArchiveManifest, ServiceError> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| export_err(&mpath, e))?;
    let m: ArchiveManifest = serde_json::from_str(&text).map_err(|e| export_err(&mpath, e))?;
    for (rel, want) in &m.files {
        let got = sha256_file(&dir.join(rel))?;
        if &got != want {
            return Err(ServiceError::Corrupt(format!("{rel}: hash mismatch")));
        }
    }
    Ok(m)
}
