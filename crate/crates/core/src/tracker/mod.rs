//! Multi-object tracking: block-matching propagation, greedy IoU association
//! and track lifecycle.

mod assoc;
mod flow;
mod summary;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Detection;
use crate::geometry::BoundingBox;
use crate::ingest::Frame;

pub use assoc::{associate, Association};
pub use flow::{estimate_flow, FlowVector};
pub use summary::{summarize_track, summary_indices, Crop, CropImage, FrameLookup, FrameStore};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TrackerError {
    #[error("frame {got} presented after frame {last}")]
    OutOfOrder { last: u64, got: u64 },
    #[error("region {0:?} lies outside the frame")]
    RegionOutsideFrame(BoundingBox),
    #[error("frame size changed from {prev:?} to {cur:?}")]
    FrameSizeMismatch { prev: (u32, u32), cur: (u32, u32) },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Detected,
    Propagated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackState {
    Active,
    Lost,
    Finalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewLabel {
    #[default]
    Unreviewed,
    TruePositive,
    FalsePositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame_id: u64,
    #[serde(flatten)]
    pub bbox: BoundingBox,
    #[serde(rename = "conf")]
    pub confidence: f64,
    pub provenance: Provenance,
}

/// One object identity. Serializes as the exported track record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u64,
    pub state: TrackState,
    pub review_label: ReviewLabel,
    pub points: Vec<TrackPoint>,
    #[serde(skip)]
    pub misses: u32,
}

impl Track {
    /// A fresh active track holding one point.
    pub fn started(track_id: u64, point: TrackPoint) -> Self {
        Self {
            track_id,
            state: TrackState::Active,
            review_label: ReviewLabel::Unreviewed,
            points: vec![point],
            misses: 0,
        }
    }

    pub fn last(&self) -> &TrackPoint {
        self.points.last().expect("tracks always hold a point")
    }

    pub fn first_frame(&self) -> u64 {
        self.points.first().map(|p| p.frame_id).unwrap_or(0)
    }

    pub fn last_frame(&self) -> u64 {
        self.points.last().map(|p| p.frame_id).unwrap_or(0)
    }

    pub fn best_confidence(&self) -> f64 {
        self.points
            .iter()
            .filter(|p| p.provenance == Provenance::Detected)
            .map(|p| p.confidence)
            .fold(0.0, f64::max)
    }

    fn last_detected_confidence(&self) -> f64 {
        self.points
            .iter()
            .rev()
            .find(|p| p.provenance == Provenance::Detected)
            .map(|p| p.confidence)
            .unwrap_or(0.0)
    }

    /// Append `p`, or replace the last point when it is on the same frame.
    pub fn upsert(&mut self, p: TrackPoint) {
        match self.points.last_mut() {
            Some(last) if last.frame_id == p.frame_id => *last = p,
            _ => self.points.push(p),
        }
    }

    /// Drop propagated points after the last detection.
    pub fn trim_trailing_propagated(&mut self) {
        if let Some(i) = self.points.iter().rposition(|p| p.provenance == Provenance::Detected) {
            self.points.truncate(i + 1);
        }
    }
}

/// Incremental change to a track, emitted by [`Tracker::step`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrackEvent {
    Created { track_id: u64, point: TrackPoint },
    /// New point on a new frame, or replacement of the point on the same frame.
    Updated { track_id: u64, point: TrackPoint, misses: u32 },
    /// The track went unmatched for longer than the patience; its trailing
    /// propagated points were removed.
    Lost { track_id: u64, last_frame: u64 },
    /// End of stream for a still-active track.
    Finalized { track_id: u64 },
}

impl TrackEvent {
    pub fn track_id(&self) -> u64 {
        match self {
            TrackEvent::Created { track_id, .. }
            | TrackEvent::Updated { track_id, .. }
            | TrackEvent::Lost { track_id, .. }
            | TrackEvent::Finalized { track_id } => *track_id,
        }
    }

    /// Same event with its point mapped through `f`.
    pub fn map_point(self, f: impl FnOnce(&BoundingBox) -> BoundingBox) -> Self {
        match self {
            TrackEvent::Created { track_id, mut point } => {
                point.bbox = f(&point.bbox);
                TrackEvent::Created { track_id, point }
            }
            TrackEvent::Updated {
                track_id,
                mut point,
                misses,
            } => {
                point.bbox = f(&point.bbox);
                TrackEvent::Updated { track_id, point, misses }
            }
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub iou_threshold: f64,
    /// Consecutive unmatched detect frames tolerated before a track is lost.
    pub patience: u32,
    pub flow_radius: u32,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            patience: 5,
            flow_radius: 16,
        }
    }
}

/// Single-consumer tracker; frames must arrive in increasing `frame_id`.
pub struct Tracker {
    cfg: TrackerConfig,
    active: Vec<Track>,
    closed: Vec<Track>,
    next_id: u64,
    prev: Option<Frame>,
}

/// Move every active track onto `cur` using its region's flow from `prev`.
/// Propagation does not count as a miss.
pub fn propagate_tracks(tracks: &mut [Track], prev: &Frame, cur: &Frame, radius: u32) -> Vec<TrackPoint> {
    tracks
        .iter_mut()
        .map(|t| {
            let from = t.last().bbox;
            let v = estimate_flow(prev, cur, &from, radius).unwrap_or(FlowVector {
                dx: 0,
                dy: 0,
                score: 0.0,
            });
            let moved = from.translated(v.dx as f64, v.dy as f64).clamped_to(cur.width, cur.height);
            let p = TrackPoint {
                frame_id: cur.frame_id,
                bbox: moved,
                confidence: t.last_detected_confidence(),
                provenance: Provenance::Propagated,
            };
            t.upsert(p);
            p
        })
        .collect()
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self {
            cfg,
            active: Vec::new(),
            closed: Vec::new(),
            next_id: 0,
            prev: None,
        }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn active(&self) -> &[Track] {
        &self.active
    }

    /// Advance to `frame`. `dets` is `Some` on detect frames (possibly
    /// empty) and `None` on frames the detector skipped.
    pub fn step(&mut self, frame: &Frame, dets: Option<&[Detection]>) -> Result<Vec<TrackEvent>, TrackerError> {
        if let Some(prev) = &self.prev {
            if frame.frame_id <= prev.frame_id {
                return Err(TrackerError::OutOfOrder {
                    last: prev.frame_id,
                    got: frame.frame_id,
                });
            }
        }
        let mut events = Vec::new();
        if let Some(prev) = &self.prev {
            if prev.width == frame.width && prev.height == frame.height {
                propagate_tracks(&mut self.active, prev, frame, self.cfg.flow_radius);
            } else {
                // Resolution change: carry boxes over unchanged.
                for t in &mut self.active {
                    let p = TrackPoint {
                        frame_id: frame.frame_id,
                        bbox: t.last().bbox.clamped_to(frame.width, frame.height),
                        confidence: t.last_detected_confidence(),
                        provenance: Provenance::Propagated,
                    };
                    t.upsert(p);
                }
            }
        }

        match dets {
            None => {
                for t in &self.active {
                    events.push(TrackEvent::Updated {
                        track_id: t.track_id,
                        point: *t.last(),
                        misses: t.misses,
                    });
                }
            }
            Some(dets) => {
                let boxes: Vec<(u64, BoundingBox)> = self.active.iter().map(|t| (t.track_id, t.last().bbox)).collect();
                let a = associate(dets, &boxes, self.cfg.iou_threshold);
                let mut matched = vec![None; self.active.len()];
                for &(di, ti) in &a.matches {
                    matched[ti] = Some(di);
                }
                let mut survivors = Vec::with_capacity(self.active.len());
                for (t, m) in std::mem::take(&mut self.active).into_iter().zip(matched) {
                    let mut t = t;
                    match m {
                        Some(di) => {
                            let d = &dets[di];
                            t.upsert(TrackPoint {
                                frame_id: frame.frame_id,
                                bbox: d.bbox,
                                confidence: d.confidence,
                                provenance: Provenance::Detected,
                            });
                            t.misses = 0;
                        }
                        None => t.misses += 1,
                    }
                    if t.misses > self.cfg.patience {
                        t.trim_trailing_propagated();
                        t.state = TrackState::Lost;
                        events.push(TrackEvent::Lost {
                            track_id: t.track_id,
                            last_frame: t.last_frame(),
                        });
                        self.closed.push(t);
                    } else {
                        events.push(TrackEvent::Updated {
                            track_id: t.track_id,
                            point: *t.last(),
                            misses: t.misses,
                        });
                        survivors.push(t);
                    }
                }
                self.active = survivors;
                for di in a.unmatched_detections {
                    let d = &dets[di];
                    let point = TrackPoint {
                        frame_id: frame.frame_id,
                        bbox: d.bbox,
                        confidence: d.confidence,
                        provenance: Provenance::Detected,
                    };
                    let track_id = self.next_id;
                    self.next_id += 1;
                    self.active.push(Track {
                        track_id,
                        state: TrackState::Active,
                        review_label: ReviewLabel::Unreviewed,
                        points: vec![point],
                        misses: 0,
                    });
                    events.push(TrackEvent::Created { track_id, point });
                }
            }
        }
        self.prev = Some(frame.clone());
        Ok(events)
    }

    /// Close the stream: every active track becomes finalized.
    pub fn finish(&mut self) -> Vec<TrackEvent> {
        let mut events = Vec::new();
        for mut t in self.active.drain(..) {
            t.state = TrackState::Finalized;
            events.push(TrackEvent::Finalized { track_id: t.track_id });
            self.closed.push(t);
        }
        self.prev = None;
        events
    }

    /// Every track seen so far, closed and active, ordered by id.
    pub fn tracks(&self) -> Vec<Track> {
        let mut all: Vec<Track> = self.closed.iter().chain(&self.active).cloned().collect();
        all.sort_by_key(|t| t.track_id);
        all
    }
}

#[cfg(test)]
mod tests {
    use super::flow::tests::{shifted, textured};
    use super::*;

    fn det(id: u64, b: BoundingBox) -> Detection {
        Detection::new(id, b, 0.9)
    }

    fn at(frame: &Frame, id: u64) -> Frame {
        Frame { frame_id: id, ..frame.clone() }
    }

    #[test]
    fn genesis_creates_one_track() {
        let f = textured(0, 100, 100, 1);
        let mut tr = Tracker::new(TrackerConfig::default());
        let ev = tr.step(&f, Some(&[det(0, BoundingBox::new(10.0, 10.0, 20.0, 20.0))])).unwrap();
        assert_eq!(ev.len(), 1);
        assert!(matches!(ev[0], TrackEvent::Created { track_id: 0, .. }));
        let t = &tr.tracks()[0];
        assert_eq!(t.points.len(), 1);
        assert_eq!(t.points[0].provenance, Provenance::Detected);
    }

    #[test]
    fn static_object_single_track_never_lost() {
        let f = textured(0, 100, 100, 2);
        let b = BoundingBox::new(30.0, 30.0, 20.0, 20.0);
        let mut tr = Tracker::new(TrackerConfig::default());
        for id in 0..50 {
            let ev = tr.step(&at(&f, id), Some(&[det(id, b)])).unwrap();
            assert!(ev.iter().all(|e| !matches!(e, TrackEvent::Lost { .. })));
        }
        let tracks = tr.tracks();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].points.len(), 50);
        assert!(tracks[0].points.iter().all(|p| p.provenance == Provenance::Detected));
    }

    #[test]
    fn lost_after_patience_exceeded() {
        // Visible 0..=9, absent 10..=20, patience 5: misses reach 6 on the
        // sixth absent frame, frame 15.
        let f = textured(0, 100, 100, 3);
        let b = BoundingBox::new(30.0, 30.0, 20.0, 20.0);
        let mut tr = Tracker::new(TrackerConfig {
            patience: 5,
            ..Default::default()
        });
        let mut lost_at = None;
        for id in 0..=20 {
            let dets: Vec<Detection> = if id <= 9 { vec![det(id, b)] } else { vec![] };
            for e in tr.step(&at(&f, id), Some(&dets)).unwrap() {
                if let TrackEvent::Lost { last_frame, .. } = e {
                    assert!(lost_at.is_none());
                    lost_at = Some(id);
                    assert_eq!(last_frame, 9);
                }
            }
        }
        assert_eq!(lost_at, Some(15));
        let t = &tr.tracks()[0];
        assert_eq!(t.state, TrackState::Lost);
        assert!(t.misses > 5);
        assert_eq!(t.last_frame(), 9);
    }

    #[test]
    fn propagation_follows_scene_shift() {
        let prev = textured(0, 120, 100, 4);
        let cur = shifted(&prev, 3, -2);
        let mut tracks = vec![
            Track {
                track_id: 0,
                state: TrackState::Active,
                review_label: ReviewLabel::Unreviewed,
                points: vec![TrackPoint {
                    frame_id: 0,
                    bbox: BoundingBox::new(20.0, 30.0, 16.0, 16.0),
                    confidence: 0.8,
                    provenance: Provenance::Detected,
                }],
                misses: 2,
            },
            Track {
                track_id: 1,
                state: TrackState::Active,
                review_label: ReviewLabel::Unreviewed,
                points: vec![TrackPoint {
                    frame_id: 0,
                    bbox: BoundingBox::new(70.0, 50.0, 20.0, 24.0),
                    confidence: 0.6,
                    provenance: Provenance::Detected,
                }],
                misses: 0,
            },
        ];
        let pts = propagate_tracks(&mut tracks, &prev, &cur, 8);
        assert_eq!(pts[0].bbox, BoundingBox::new(23.0, 28.0, 16.0, 16.0));
        assert_eq!(pts[1].bbox, BoundingBox::new(73.0, 48.0, 20.0, 24.0));
        assert_eq!(pts[0].confidence, 0.8);
        assert_eq!(pts[0].provenance, Provenance::Propagated);
        assert_eq!(tracks[0].misses, 2);

        // Static scene: identical box.
        let pts = propagate_tracks(&mut tracks, &cur, &at(&cur, 2), 8);
        assert_eq!(pts[0].bbox, BoundingBox::new(23.0, 28.0, 16.0, 16.0));
    }

    #[test]
    fn propagation_clamps_at_frame_edge() {
        let prev = textured(0, 60, 60, 5);
        let cur = shifted(&prev, 6, 0);
        let mut tracks = vec![Track {
            track_id: 0,
            state: TrackState::Active,
            review_label: ReviewLabel::Unreviewed,
            points: vec![TrackPoint {
                frame_id: 0,
                bbox: BoundingBox::new(40.0, 10.0, 16.0, 16.0),
                confidence: 1.0,
                provenance: Provenance::Detected,
            }],
            misses: 0,
        }];
        let pts = propagate_tracks(&mut tracks, &prev, &cur, 8);
        assert!(pts[0].bbox.right() <= 60.0);
        assert!(pts[0].bbox.intersects_frame(60, 60));
    }

    #[test]
    fn out_of_order_rejected() {
        let f = textured(5, 20, 20, 6);
        let mut tr = Tracker::new(TrackerConfig::default());
        tr.step(&f, None).unwrap();
        assert_eq!(
            tr.step(&at(&f, 5), None).unwrap_err(),
            TrackerError::OutOfOrder { last: 5, got: 5 }
        );
    }

    #[test]
    fn detect_frame_overwrites_propagated_point() {
        let f0 = textured(0, 100, 100, 7);
        let f1 = shifted(&f0, 2, 0);
        let b0 = BoundingBox::new(20.0, 20.0, 20.0, 20.0);
        let b1 = BoundingBox::new(22.5, 20.0, 20.0, 20.0);
        let mut tr = Tracker::new(TrackerConfig::default());
        tr.step(&f0, Some(&[det(0, b0)])).unwrap();
        let ev = tr.step(&f1, Some(&[det(1, b1)])).unwrap();
        assert_eq!(ev.len(), 1);
        let t = &tr.tracks()[0];
        assert_eq!(t.points.len(), 2);
        assert_eq!(t.points[1].bbox, b1);
        assert_eq!(t.points[1].provenance, Provenance::Detected);
    }

    #[test]
    fn finish_finalizes_active() {
        let f = textured(0, 50, 50, 8);
        let mut tr = Tracker::new(TrackerConfig::default());
        tr.step(&f, Some(&[det(0, BoundingBox::new(5.0, 5.0, 10.0, 10.0))])).unwrap();
        let ev = tr.finish();
        assert_eq!(ev, vec![TrackEvent::Finalized { track_id: 0 }]);
        assert_eq!(tr.tracks()[0].state, TrackState::Finalized);
    }

    #[test]
    fn track_record_json_shape() {
        let t = Track {
            track_id: 3,
            state: TrackState::Lost,
            review_label: ReviewLabel::TruePositive,
            points: vec![TrackPoint {
                frame_id: 9,
                bbox: BoundingBox::new(1.0, 2.0, 3.0, 4.0),
                confidence: 0.5,
                provenance: Provenance::Propagated,
            }],
            misses: 6,
        };
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(
            s,
            r#"{"track_id":3,"state":"lost","review_label":"true_positive","points":[{"frame_id":9,"x":1.0,"y":2.0,"w":3.0,"h":4.0,"conf":0.5,"provenance":"propagated"}]}"#
        );
        let back: Track = serde_json::from_str(&s).unwrap();
        assert_eq!(back.points, t.points);
    }
}
