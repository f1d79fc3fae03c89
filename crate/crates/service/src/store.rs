//! Live track store behind the review API.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use lru::LruCache;
use reefpipe_core::ingest::Frame;
use reefpipe_core::pipeline::{apply_event, Metrics, RunStatus, SinkError, StageMetrics, TrackSink};
use reefpipe_core::tracker::{
    summarize_track, Crop, FrameLookup, FrameStore, Provenance, ReviewLabel, Track, TrackEvent, TrackState,
};
use serde::{Deserialize, Serialize};

use crate::events::{EventHub, ServiceEvent};
use crate::labels::{LabelLog, LabelRecord, Verdict};
use crate::ServiceError;

/// Compact listing row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub track_id: u64,
    pub state: TrackState,
    pub review_label: ReviewLabel,
    pub points: usize,
    pub first_frame: u64,
    pub last_frame: u64,
    pub best_confidence: f64,
    /// Store-wide sequence number of the last change to the track.
    pub updated: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct TrackFilter {
    pub state: Option<TrackState>,
    pub label: Option<ReviewLabel>,
    #[serde(default)]
    pub unreviewed_only: bool,
}

impl TrackFilter {
    fn accepts(&self, t: &Track) -> bool {
        self.state.is_none_or(|s| s == t.state)
            && self.label.is_none_or(|l| l == t.review_label)
            && (!self.unreviewed_only || t.review_label == ReviewLabel::Unreviewed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPage {
    pub items: Vec<TrackSummary>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CropRef {
    pub index: usize,
    pub frame_id: u64,
    pub provenance: Provenance,
    pub confidence: f64,
    /// `None` when the frame is no longer available.
    pub url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackDetail {
    #[serde(flatten)]
    pub track: Track,
    pub summary: TrackSummary,
    pub crops: Vec<CropRef>,
    pub labels: Vec<LabelRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrackCounts {
    pub total: usize,
    pub active: usize,
    pub lost: usize,
    pub finalized: usize,
    pub unreviewed: usize,
    pub true_positive: usize,
    pub false_positive: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LabelCounts {
    /// Tracks with a current verdict.
    pub current: usize,
    /// Records in the label log.
    pub history: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunInfo {
    pub running: bool,
    pub outcome: Option<RunStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stats {
    pub tracks: TrackCounts,
    pub labels: LabelCounts,
    pub run: RunInfo,
    pub metrics: Option<StageMetrics>,
}

/// Frames from a recording directory (`frames/frame_NNNNNN.jpg`), used when
/// the in-memory store no longer holds them.
#[derive(Debug, Clone)]
pub struct RecordedFrames {
    root: PathBuf,
}

impl RecordedFrames {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, frame_id: u64) -> PathBuf {
        self.root.join("frames").join(reefpipe_core::ingest::frame_file_name(frame_id))
    }
}

impl FrameLookup for RecordedFrames {
    fn frame(&self, frame_id: u64) -> Option<Frame> {
        let path = self.path_of(frame_id);
        let img = image::open(&path).ok()?.to_rgb8();
        let (w, h) = img.dimensions();
        Frame::new(frame_id, 0, w, h, img.into_raw(), path.display().to_string()).ok()
    }
}

struct Frames {
    memory: FrameStore,
    disk: Option<RecordedFrames>,
}

impl FrameLookup for Frames {
    fn frame(&self, frame_id: u64) -> Option<Frame> {
        self.memory
            .frame(frame_id)
            .or_else(|| self.disk.as_ref().and_then(|d| d.frame(frame_id)))
    }
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    pub labels_path: PathBuf,
    /// Recording directory holding `frames/` and `metadata.jsonl`.
    pub record_dir: Option<PathBuf>,
    pub summary_len: usize,
    pub frame_store_capacity: usize,
    pub event_capacity: usize,
    /// Effective configuration, echoed into archive manifests.
    pub config: serde_json::Value,
}

impl StoreOptions {
    /// Defaults for a run directory: `labels.jsonl` inside it, frames
    /// recorded under it.
    pub fn for_run_dir(dir: &Path) -> Self {
        Self {
            labels_path: dir.join("labels.jsonl"),
            record_dir: Some(dir.to_path_buf()),
            summary_len: 8,
            frame_store_capacity: 600,
            event_capacity: 4096,
            config: serde_json::Value::Null,
        }
    }
}

struct Entry {
    track: Arc<Track>,
    updated: u64,
}

struct Inner {
    tracks: HashMap<u64, Entry>,
    verdicts: HashMap<u64, LabelRecord>,
    history: Vec<LabelRecord>,
    log: LabelLog,
    seq: u64,
    running: bool,
    outcome: Option<RunStatus>,
}

type CropKey = (u64, u64);

/// Single writer (the tracker sink and label requests), many readers. Every
/// read hands out an immutable snapshot.
pub struct TrackStore {
    inner: RwLock<Inner>,
    hub: EventHub,
    frames: Frames,
    crops: Mutex<LruCache<CropKey, Arc<Vec<Crop>>>>,
    metrics: Mutex<Option<Metrics>>,
    opts: StoreOptions,
}

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

fn summary_of(t: &Track, updated: u64) -> TrackSummary {
    TrackSummary {
        track_id: t.track_id,
        state: t.state,
        review_label: t.review_label,
        points: t.points.len(),
        first_frame: t.first_frame(),
        last_frame: t.last_frame(),
        best_confidence: t.best_confidence(),
        updated,
    }
}

impl TrackStore {
    /// Open the store, replaying any existing label log.
    pub fn open(opts: StoreOptions) -> Result<Arc<Self>, ServiceError> {
        let (log, history) = LabelLog::open(&opts.labels_path)?;
        let mut verdicts = HashMap::new();
        for r in &history {
            verdicts.insert(r.track_id, r.clone());
        }
        Ok(Arc::new(Self {
            inner: RwLock::new(Inner {
                tracks: HashMap::new(),
                verdicts,
                history,
                log,
                seq: 0,
                running: false,
                outcome: None,
            }),
            hub: EventHub::new(opts.event_capacity),
            frames: Frames {
                memory: FrameStore::new(opts.frame_store_capacity),
                disk: opts.record_dir.clone().map(RecordedFrames::new),
            },
            crops: Mutex::new(LruCache::new(NonZeroUsize::new(256).expect("non-zero"))),
            metrics: Mutex::new(None),
            opts,
        }))
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|p| p.into_inner())
    }

    pub fn hub(&self) -> &EventHub {
        &self.hub
    }

    pub fn options(&self) -> &StoreOptions {
        &self.opts
    }

    pub fn record_dir(&self) -> Option<&Path> {
        self.opts.record_dir.as_deref()
    }

    /// Attach the live counters of a running pipeline.
    pub fn attach_metrics(&self, m: Metrics) {
        *self.metrics.lock().unwrap_or_else(|p| p.into_inner()) = Some(m);
        self.write().running = true;
    }

    pub fn metrics_snapshot(&self) -> Option<StageMetrics> {
        self.metrics
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .as_ref()
            .map(Metrics::snapshot)
    }

    pub fn finish_run(&self, outcome: RunStatus) {
        let mut st = self.write();
        st.running = false;
        st.outcome = Some(outcome.clone());
        self.hub.publish(ServiceEvent::RunFinished { outcome });
    }

    /// Bulk-load finished tracks, e.g. a previous run's `tracks.jsonl`.
    /// Current verdicts from the label log override stored labels.
    pub fn load_tracks(&self, tracks: Vec<Track>) {
        let mut tracks = tracks;
        tracks.sort_by_key(|t| (t.last_frame(), t.track_id));
        let mut st = self.write();
        for mut t in tracks {
            if let Some(r) = st.verdicts.get(&t.track_id) {
                t.review_label = r.verdict.review_label();
            }
            st.seq += 1;
            let updated = st.seq;
            st.tracks.insert(
                t.track_id,
                Entry {
                    track: Arc::new(t),
                    updated,
                },
            );
        }
    }

    /// Fold one tracker event into the store and publish it.
    pub fn apply(&self, ev: &TrackEvent) {
        let mut guard = self.write();
        let st = &mut *guard;
        st.seq += 1;
        let seq = st.seq;
        let id = ev.track_id();
        if let TrackEvent::Created { track_id, point } = ev {
            let mut t = Track::started(*track_id, *point);
            if let Some(r) = st.verdicts.get(track_id) {
                t.review_label = r.verdict.review_label();
            }
            st.tracks.insert(
                *track_id,
                Entry {
                    track: Arc::new(t),
                    updated: seq,
                },
            );
        } else if let Some(e) = st.tracks.get_mut(&id) {
            apply_event(Arc::make_mut(&mut e.track), ev);
            e.updated = seq;
        } else {
            return;
        }
        let e = &st.tracks[&id];
        let track = summary_of(&e.track, e.updated);
        self.hub.publish(match ev {
            TrackEvent::Created { .. } => ServiceEvent::TrackCreated { track },
            TrackEvent::Updated { .. } => ServiceEvent::TrackUpdated { track },
            TrackEvent::Lost { .. } => ServiceEvent::TrackLost { track },
            TrackEvent::Finalized { .. } => ServiceEvent::TrackFinalized { track },
        });
    }

    pub fn insert_frame(&self, frame: Frame) {
        self.frames.memory.insert(frame);
    }

    /// Summaries matching `filter`, newest update first, ties by id.
    pub fn list_tracks(&self, filter: &TrackFilter, offset: usize, limit: usize) -> TrackPage {
        let st = self.read();
        let mut rows: Vec<TrackSummary> = st
            .tracks
            .values()
            .filter(|e| filter.accepts(&e.track))
            .map(|e| summary_of(&e.track, e.updated))
            .collect();
        drop(st);
        rows.sort_by(|a, b| b.updated.cmp(&a.updated).then(a.track_id.cmp(&b.track_id)));
        let total = rows.len();
        let items = rows.into_iter().skip(offset).take(limit).collect();
        TrackPage {
            items,
            total,
            offset,
            limit,
        }
    }

    /// Immutable snapshot of one track.
    pub fn track(&self, id: u64) -> Option<Arc<Track>> {
        self.read().tracks.get(&id).map(|e| Arc::clone(&e.track))
    }

    /// Snapshot of every track, ordered by id.
    pub fn tracks(&self) -> Vec<Arc<Track>> {
        let mut v: Vec<Arc<Track>> = self.read().tracks.values().map(|e| Arc::clone(&e.track)).collect();
        v.sort_by_key(|t| t.track_id);
        v
    }

    pub fn label_history(&self) -> Vec<LabelRecord> {
        self.read().history.clone()
    }

    pub fn current_verdict(&self, id: u64) -> Option<LabelRecord> {
        self.read().verdicts.get(&id).cloned()
    }

    fn crops_of(&self, id: u64) -> Option<(Arc<Track>, Arc<Vec<Crop>>)> {
        let (track, updated) = {
            let st = self.read();
            let e = st.tracks.get(&id)?;
            (Arc::clone(&e.track), e.updated)
        };
        let key = (id, updated);
        if let Some(c) = self.crops.lock().unwrap_or_else(|p| p.into_inner()).get(&key) {
            return Some((track, Arc::clone(c)));
        }
        let crops = Arc::new(summarize_track(&track, &self.frames, self.opts.summary_len));
        self.crops
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .put(key, Arc::clone(&crops));
        Some((track, crops))
    }

    pub fn get_track(&self, id: u64) -> Result<TrackDetail, ServiceError> {
        let (track, crops) = self.crops_of(id).ok_or(ServiceError::NotFound(id))?;
        let (updated, labels) = {
            let st = self.read();
            let updated = st.tracks.get(&id).map_or(0, |e| e.updated);
            let labels = st.history.iter().filter(|r| r.track_id == id).cloned().collect();
            (updated, labels)
        };
        let crops = crops
            .iter()
            .enumerate()
            .map(|(index, c)| CropRef {
                index,
                frame_id: c.frame_id,
                provenance: c.provenance,
                confidence: c.confidence,
                url: (!c.is_placeholder()).then(|| format!("/api/tracks/{id}/crops/{index}")),
            })
            .collect();
        Ok(TrackDetail {
            summary: summary_of(&track, updated),
            track: (*track).clone(),
            crops,
            labels,
        })
    }

    /// JPEG bytes of crop `n` of a track's summary.
    pub fn crop_jpeg(&self, id: u64, n: usize) -> Result<Vec<u8>, ServiceError> {
        let (_, crops) = self.crops_of(id).ok_or(ServiceError::NotFound(id))?;
        let img = crops
            .get(n)
            .and_then(|c| c.image.as_ref())
            .ok_or(ServiceError::NoCrop { track_id: id, index: n })?;
        let mut out = std::io::Cursor::new(Vec::new());
        img.to_rgb_image()
            .write_to(&mut out, image::ImageFormat::Jpeg)
            .map_err(|e| ServiceError::Corrupt(format!("crop encoding failed: {e}")))?;
        Ok(out.into_inner())
    }

    /// Persist a verdict, then apply and announce it. The record is on disk
    /// before this returns.
    pub fn label_track(&self, id: u64, verdict: Verdict, reviewer: &str) -> Result<LabelRecord, ServiceError> {
        let mut guard = self.write();
        let st = &mut *guard;
        let entry = st.tracks.get_mut(&id).ok_or(ServiceError::NotFound(id))?;
        let rec = LabelRecord {
            track_id: id,
            verdict,
            reviewer: reviewer.to_string(),
            labeled_at_ms: now_ms(),
        };
        st.log.append(&rec)?;
        Arc::make_mut(&mut entry.track).review_label = verdict.review_label();
        st.history.push(rec.clone());
        st.verdicts.insert(id, rec.clone());
        self.hub.publish(ServiceEvent::TrackLabeled { label: rec.clone() });
        Ok(rec)
    }

    pub fn stats(&self) -> Stats {
        let st = self.read();
        let mut c = TrackCounts::default();
        for e in st.tracks.values() {
            c.total += 1;
            match e.track.state {
                TrackState::Active => c.active += 1,
                TrackState::Lost => c.lost += 1,
                TrackState::Finalized => c.finalized += 1,
            }
            match e.track.review_label {
                ReviewLabel::Unreviewed => c.unreviewed += 1,
                ReviewLabel::TruePositive => c.true_positive += 1,
                ReviewLabel::FalsePositive => c.false_positive += 1,
            }
        }
        let stats = Stats {
            tracks: c,
            labels: LabelCounts {
                current: st.verdicts.len(),
                history: st.history.len(),
            },
            run: RunInfo {
                running: st.running,
                outcome: st.outcome.clone(),
            },
            metrics: None,
        };
        drop(st);
        Stats {
            metrics: self.metrics_snapshot(),
            ..stats
        }
    }
}

/// Pipeline sink feeding a [`TrackStore`].
pub struct StoreSink {
    store: Arc<TrackStore>,
}

impl StoreSink {
    pub fn new(store: Arc<TrackStore>) -> Self {
        Self { store }
    }
}

impl TrackSink for StoreSink {
    fn on_event(&mut self, event: &TrackEvent) -> Result<(), SinkError> {
        self.store.apply(event);
        Ok(())
    }

    fn on_frame(&mut self, frame: &Frame) -> Result<(), SinkError> {
        self.store.insert_frame(frame.clone());
        Ok(())
    }
}
