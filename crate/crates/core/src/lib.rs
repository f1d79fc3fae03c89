//! Core of the reefpipe survey analytics pipeline.
//!
//! Frames come in through [`ingest`], are batched through a [`detector`]
//! backend, linked into tracks by [`tracker`] and scored by [`eval`]. The
//! [`pipeline`] module wires the stages together over bounded queues.

pub mod detector;
pub mod eval;
pub mod geometry;
pub mod ingest;
pub mod pipeline;
pub mod rng;
pub mod tracker;

pub use detector::{Detection, Detector, DetectorError};
pub use geometry::{iou, BoundingBox};
pub use ingest::{Frame, FrameSource, SourceSpec};
pub use pipeline::{Pipeline, PipelineConfig, PipelineError, RunReport, RunStatus, StageMetrics};
pub use tracker::{Track, TrackEvent, TrackPoint, TrackState};
