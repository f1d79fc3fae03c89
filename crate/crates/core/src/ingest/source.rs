use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{
    interpolate_geo, AnnotationTable, Frame, GeoFix, IngestError, MetadataRecord, Result, SyntheticScene,
    SyntheticSpec,
};

/// A directory laid out as `frames/frame_%06d.{jpg,png}` with optional
/// `metadata.jsonl`, `gps.jsonl` and `annotations.csv` beside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectorySpec {
    pub root: PathBuf,
    /// Timestamp spacing used for frames that have no metadata line.
    #[serde(default = "default_interval")]
    pub frame_interval_ms: i64,
}

fn default_interval() -> i64 {
    33
}

impl DirectorySpec {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            frame_interval_ms: default_interval(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Directory(DirectorySpec),
    Synthetic(SyntheticSpec),
}

impl FromStr for SourceSpec {
    type Err = IngestError;

    /// `synthetic:seed=7,frames=500,objects=3` or a directory path.
    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.strip_prefix("synthetic:").or(if s == "synthetic" { Some("") } else { None }) else {
            return Ok(SourceSpec::Directory(DirectorySpec::new(s)));
        };
        let mut spec = SyntheticSpec::default();
        for kv in rest.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| IngestError::Descriptor(format!("expected key=value, got {kv:?}")))?;
            let bad = |e: &dyn std::fmt::Display| IngestError::Descriptor(format!("{k}: {e}"));
            let v = v.trim();
            match k.trim() {
                "seed" => spec.seed = v.parse().map_err(|e| bad(&e))?,
                "frames" => spec.frames = v.parse().map_err(|e| bad(&e))?,
                "width" => spec.width = v.parse().map_err(|e| bad(&e))?,
                "height" => spec.height = v.parse().map_err(|e| bad(&e))?,
                "objects" => spec.objects = v.parse().map_err(|e| bad(&e))?,
                "max_speed" => spec.max_speed = v.parse().map_err(|e| bad(&e))?,
                "min_size" => spec.min_size = v.parse().map_err(|e| bad(&e))?,
                "max_size" => spec.max_size = v.parse().map_err(|e| bad(&e))?,
                "frame_interval_ms" => spec.frame_interval_ms = v.parse().map_err(|e| bad(&e))?,
                "start_ms" => spec.start_ms = v.parse().map_err(|e| bad(&e))?,
                other => return Err(IngestError::Descriptor(format!("unknown synthetic key {other:?}"))),
            }
        }
        Ok(SourceSpec::Synthetic(spec))
    }
}

struct DirFrames {
    entries: std::vec::IntoIter<(u64, PathBuf)>,
    meta: HashMap<u64, MetadataRecord>,
    fixes: Vec<GeoFix>,
    interval_ms: i64,
}

enum Inner {
    Dir(DirFrames),
    Synthetic { scene: SyntheticScene, next: u64 },
}

/// Single-consumer iterator of frames in ascending `frame_id`.
pub struct FrameSource {
    inner: Inner,
    skipped: Arc<AtomicU64>,
    truth: Option<Arc<AnnotationTable>>,
    len_hint: u64,
}

impl FrameSource {
    pub fn from_scene(scene: SyntheticScene) -> Self {
        let len_hint = scene.len();
        let truth = Some(Arc::new(scene.truth()));
        Self {
            inner: Inner::Synthetic { scene, next: 0 },
            skipped: Arc::default(),
            truth,
            len_hint,
        }
    }

    /// Frames that could not be decoded and were skipped so far.
    pub fn skipped(&self) -> u64 {
        self.skipped.load(Ordering::Relaxed)
    }

    pub fn skip_counter(&self) -> Arc<AtomicU64> {
        Arc::clone(&self.skipped)
    }

    /// Ground truth shipped with the source: `annotations.csv` for
    /// directories, the generator's boxes for synthetic scenes.
    pub fn truth(&self) -> Option<Arc<AnnotationTable>> {
        self.truth.clone()
    }

    /// Upper bound on the number of frames the source will yield.
    pub fn len_hint(&self) -> u64 {
        self.len_hint
    }
}

impl Iterator for FrameSource {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        match &mut self.inner {
            Inner::Synthetic { scene, next } => {
                if *next >= scene.len() {
                    return None;
                }
                let f = scene.render(*next);
                *next += 1;
                Some(f)
            }
            Inner::Dir(d) => loop {
                let (id, path) = d.entries.next()?;
                match load_frame(d, id, &path) {
                    Ok(f) => return Some(f),
                    Err(e) => {
                        warn!("skipping unreadable frame {}: {e}", path.display());
                        self.skipped.fetch_add(1, Ordering::Relaxed);
                    }
                }
            },
        }
    }
}

/// Decode an image file. The JPEG decoder accepts files cut short and
/// fills the missing scan with grey, so JPEGs must end in an EOI marker.
fn decode_image(path: &Path) -> Result<image::RgbImage, String> {
    let bytes = fs::read(path).map_err(|e| e.to_string())?;
    let format = image::ImageFormat::from_path(path).map_err(|e| e.to_string())?;
    if format == image::ImageFormat::Jpeg {
        let end = bytes.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
        if !bytes[..end].ends_with(&[0xFF, 0xD9]) {
            return Err("truncated JPEG: no end-of-image marker".into());
        }
    }
    image::load_from_memory_with_format(&bytes, format)
        .map(|img| img.to_rgb8())
        .map_err(|e| e.to_string())
}

fn load_frame(d: &DirFrames, id: u64, path: &Path) -> Result<Frame, String> {
    let img = decode_image(path)?;
    let (w, h) = img.dimensions();
    let meta = d.meta.get(&id);
    let ts = meta.map(|m| m.timestamp_ms).unwrap_or(id as i64 * d.interval_ms);
    let geo = match meta.and_then(|m| m.lat.zip(m.lon)) {
        Some((lat, lon)) => GeoFix::new(lat, lon, ts).ok(),
        None if !d.fixes.is_empty() => interpolate_geo(&d.fixes, ts).ok(),
        None => None,
    };
    let source_ref = meta
        .and_then(|m| m.source_ref.clone())
        .unwrap_or_else(|| path.display().to_string());
    Frame::new(id, ts, w, h, img.into_raw(), source_ref)
        .map(|f| f.with_geo(geo))
        .map_err(|e| e.to_string())
}

/// Parse the numeric id out of `frame_000123.jpg`.
fn frame_id_of(name: &str) -> Option<u64> {
    let stem = name.strip_prefix("frame_")?;
    let (digits, ext) = stem.split_once('.')?;
    if !matches!(ext.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png") || digits.is_empty() {
        return None;
    }
    if !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| IngestError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IngestError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IngestError::Metadata {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn open_directory(spec: &DirectorySpec) -> Result<FrameSource> {
    let frames_dir = spec.root.join("frames");
    if !frames_dir.is_dir() {
        return Err(IngestError::MissingSource(frames_dir));
    }
    let listing = fs::read_dir(&frames_dir).map_err(|e| IngestError::Io {
        path: frames_dir.clone(),
        source: e,
    })?;
    let mut entries: Vec<(u64, PathBuf)> = listing
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name();
            frame_id_of(name.to_str()?).map(|id| (id, e.path()))
        })
        .collect();
    entries.sort();
    entries.dedup_by_key(|(id, _)| *id);

    let meta_path = spec.root.join("metadata.jsonl");
    let meta = if meta_path.exists() {
        read_jsonl::<MetadataRecord>(&meta_path)?
            .into_iter()
            .map(|m| (m.frame_id, m))
            .collect()
    } else {
        HashMap::new()
    };
    let gps_path = spec.root.join("gps.jsonl");
    let mut fixes = if gps_path.exists() {
        read_jsonl::<GeoFix>(&gps_path)?
    } else {
        Vec::new()
    };
    fixes.sort_by_key(|f| f.fix_time_ms);

    let ann_path = spec.root.join("annotations.csv");
    let truth = if ann_path.exists() {
        Some(Arc::new(AnnotationTable::read_csv(&ann_path)?))
    } else {
        None
    };

    let len_hint = entries.len() as u64;
    Ok(FrameSource {
        inner: Inner::Dir(DirFrames {
            entries: entries.into_iter(),
            meta,
            fixes,
            interval_ms: spec.frame_interval_ms,
        }),
        skipped: Arc::default(),
        truth,
        len_hint,
    })
}

pub fn open_source(spec: &SourceSpec) -> Result<FrameSource> {
    match spec {
        SourceSpec::Directory(d) => open_directory(d),
        SourceSpec::Synthetic(s) => Ok(FrameSource::from_scene(SyntheticScene::new(s.clone())?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_names() {
        assert_eq!(frame_id_of("frame_000042.jpg"), Some(42));
        assert_eq!(frame_id_of("frame_1234567.PNG"), Some(1_234_567));
        assert_eq!(frame_id_of("frame_00a.jpg"), None);
        assert_eq!(frame_id_of("frame_000001.txt"), None);
        assert_eq!(frame_id_of("thumb_000001.jpg"), None);
    }

    #[test]
    fn descriptor_parsing() {
        let s: SourceSpec = "synthetic:seed=7,frames=5".parse().unwrap();
        match s {
            SourceSpec::Synthetic(spec) => {
                assert_eq!((spec.seed, spec.frames), (7, 5));
                assert_eq!(spec.width, SyntheticSpec::default().width);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!("synthetic:colour=red".parse::<SourceSpec>().is_err());
        assert!(matches!("/data/transect".parse::<SourceSpec>().unwrap(), SourceSpec::Directory(_)));
    }

    #[test]
    fn missing_directory_is_unrecoverable() {
        let err = open_source(&SourceSpec::Directory(DirectorySpec::new("/nonexistent/reef"))).err().unwrap();
        assert!(matches!(err, IngestError::MissingSource(_)));
    }
}
