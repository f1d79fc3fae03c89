//! Batch detection interface and its backends.
//!
//! Two backends ship with the crate: [`OracleDetector`] replays ground truth
//! through a seeded noise model, and [`ExternalDetector`] talks to a model
//! process over newline-delimited JSON.

mod external;
mod oracle;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;
use crate::ingest::Frame;

pub use external::{Endpoint, ExternalConfig, ExternalDetector, HANDSHAKE};
pub use oracle::{oracle_detect, ConfidenceLaw, CostModel, NoiseModel, OracleDetector};

/// A confidence-scored box on one frame, in that frame's pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_id: u64,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(frame_id: u64, bbox: BoundingBox, confidence: f64) -> Self {
        Self {
            frame_id,
            bbox,
            confidence,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DetectorError {
    #[error("detector backend unavailable: {message} (frames {frame_ids:?})")]
    Unavailable { frame_ids: Vec<u64>, message: String },
    #[error("detector protocol error: {message} (frames {frame_ids:?})")]
    Protocol { frame_ids: Vec<u64>, message: String },
    #[error("detector missed its {deadline:?} deadline (frames {frame_ids:?})")]
    Timeout { frame_ids: Vec<u64>, deadline: Duration },
    #[error("empty batch")]
    EmptyBatch,
}

impl DetectorError {
    /// Fatal errors end the run; the rest only fail the current batch.
    pub fn is_fatal(&self) -> bool {
        matches!(self, DetectorError::Unavailable { .. })
    }

    pub fn frame_ids(&self) -> &[u64] {
        match self {
            DetectorError::Unavailable { frame_ids, .. }
            | DetectorError::Protocol { frame_ids, .. }
            | DetectorError::Timeout { frame_ids, .. } => frame_ids,
            DetectorError::EmptyBatch => &[],
        }
    }
}

/// One instance serves one worker at a time.
pub trait Detector: Send {
    /// One detection list per input frame, in batch order.
    fn detect_batch(&mut self, frames: &[Frame]) -> Result<Vec<Vec<Detection>>, DetectorError>;
}

impl<D: Detector + ?Sized> Detector for Box<D> {
    fn detect_batch(&mut self, frames: &[Frame]) -> Result<Vec<Vec<Detection>>, DetectorError> {
        (**self).detect_batch(frames)
    }
}

/// Keep detections with `confidence >= tau`, preserving order.
pub fn filter_confidence(dets: Vec<Detection>, tau: f64) -> Vec<Detection> {
    dets.into_iter().filter(|d| d.confidence >= tau).collect()
}
