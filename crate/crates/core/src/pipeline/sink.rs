use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ingest::Frame;
use crate::tracker::{Track, TrackEvent, TrackState};

#[derive(Debug, Error)]
#[error("{0}")]
pub struct SinkError(pub String);

impl SinkError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self(format!("{}: {e}", path.display()))
    }
}

/// Consumer of tracker output. Events carry boxes in original capture
/// coordinates; `on_frame` sees each frame at working resolution after its
/// events were delivered. An error aborts the run.
pub trait TrackSink: Send {
    fn on_event(&mut self, event: &TrackEvent) -> Result<(), SinkError>;

    fn on_frame(&mut self, _frame: &Frame) -> Result<(), SinkError> {
        Ok(())
    }

    /// Called once with every track after the stream ends.
    fn finish(&mut self, _tracks: &[Track]) -> Result<(), SinkError> {
        Ok(())
    }
}

impl<S: TrackSink + ?Sized> TrackSink for Box<S> {
    fn on_event(&mut self, event: &TrackEvent) -> Result<(), SinkError> {
        (**self).on_event(event)
    }

    fn on_frame(&mut self, frame: &Frame) -> Result<(), SinkError> {
        (**self).on_frame(frame)
    }

    fn finish(&mut self, tracks: &[Track]) -> Result<(), SinkError> {
        (**self).finish(tracks)
    }
}

/// Apply a non-creation event to the track it names. `Created` is a no-op.
pub fn apply_event(t: &mut Track, event: &TrackEvent) {
    match event {
        TrackEvent::Created { .. } => {}
        TrackEvent::Updated { point, misses, .. } => {
            t.upsert(*point);
            t.misses = *misses;
        }
        TrackEvent::Lost { last_frame, .. } => {
            t.points.retain(|p| p.frame_id <= *last_frame);
            t.state = TrackState::Lost;
        }
        TrackEvent::Finalized { .. } => t.state = TrackState::Finalized,
    }
}

/// Tracks rebuilt from an event stream.
#[derive(Debug, Clone, Default)]
pub struct TrackBook {
    tracks: BTreeMap<u64, Track>,
}

impl TrackBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&mut self, event: &TrackEvent) {
        match event {
            TrackEvent::Created { track_id, point } => {
                self.tracks.insert(*track_id, Track::started(*track_id, *point));
            }
            other => {
                if let Some(t) = self.tracks.get_mut(&other.track_id()) {
                    apply_event(t, other);
                }
            }
        }
    }

    pub fn get(&self, track_id: u64) -> Option<&Track> {
        self.tracks.get(&track_id)
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// All tracks ordered by id.
    pub fn tracks(&self) -> Vec<Track> {
        self.tracks.values().cloned().collect()
    }
}

/// One JSON track per line, ordered by id.
pub fn write_tracks_jsonl(path: &Path, tracks: &[Track]) -> std::io::Result<()> {
    let mut sorted: Vec<&Track> = tracks.iter().collect();
    sorted.sort_by_key(|t| t.track_id);
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        for t in sorted {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

pub fn read_tracks_jsonl(path: &Path) -> std::io::Result<Vec<Track>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

/// Writes the final track set to a `tracks.jsonl` file at end of stream.
#[derive(Debug)]
pub struct TracksFileSink {
    path: PathBuf,
}

impl TracksFileSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }
}

impl TrackSink for TracksFileSink {
    fn on_event(&mut self, _event: &TrackEvent) -> Result<(), SinkError> {
        Ok(())
    }

    fn finish(&mut self, tracks: &[Track]) -> Result<(), SinkError> {
        write_tracks_jsonl(&self.path, tracks).map_err(|e| SinkError::io(&self.path, e))
    }
}
