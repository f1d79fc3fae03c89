//! Three-stage pipeline: import, batched detection, tracking.
//!
//! Each stage runs on its own thread and stages talk only through
//! [`BoundedQueue`]s. Frames leave the detector stage in `frame_id` order
//! whether they were detected or skipped, so the tracker never sees a gap it
//! has to reorder.

mod batch;
mod config;
mod metrics;
mod queue;
mod sink;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{filter_confidence, Detection, Detector, DetectorError};
use crate::eval::Predictions;
use crate::ingest::{resize_frame, AnnotationTable, Frame, FrameRecordWriter, FrameSource, IngestError, SyntheticScene, SyntheticSpec};
use crate::tracker::{Track, Tracker, TrackerError};

pub use batch::{make_batches, Batcher};
pub use config::{build_detector, DetectorKind, ExternalSettings, PipelineConfig};
pub use metrics::{LatencyStats, Metrics, StageLatencies, StageMetrics};
pub use queue::{BoundedQueue, Closed, OverflowPolicy, Take};
pub use sink::{apply_event, read_tracks_jsonl, write_tracks_jsonl, SinkError, TrackBook, TrackSink, TracksFileSink};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Source(#[from] IngestError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("sink failure: {0}")]
    Sink(#[from] SinkError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameRole {
    Detect,
    Propagate,
}

/// Detect on every `k`-th frame, counting from frame 0.
pub fn skip_decision(frame_id: u64, k: u32) -> FrameRole {
    if frame_id.is_multiple_of(u64::from(k.max(1))) {
        FrameRole::Detect
    } else {
        FrameRole::Propagate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Stopped on request before the source was exhausted.
    Stopped,
    /// The detector backend became unavailable; frames still queued were
    /// dropped and the tracker finished on what it had.
    DetectorFailed { message: String },
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub status: RunStatus,
    pub metrics: StageMetrics,
    /// Final tracks in original capture coordinates, ordered by id.
    pub tracks: Vec<Track>,
    /// Detector output after the confidence filter, in capture coordinates.
    pub detections: Predictions,
}

struct Imported {
    frame: Frame,
    at: Instant,
}

struct Processed {
    frame: Frame,
    dets: Option<Vec<Detection>>,
    at: Instant,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    metrics: Metrics,
    stop: Arc<AtomicBool>,
    record_dir: Option<PathBuf>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            metrics: Metrics::new(),
            stop: Arc::default(),
            record_dir: None,
        })
    }

    /// Share an external stop flag, e.g. one set by a signal handler.
    pub fn with_stop_flag(mut self, stop: Arc<AtomicBool>) -> Self {
        self.stop = stop;
        self
    }

    /// Also write every imported frame at source resolution to `dir`.
    pub fn record_to(mut self, dir: impl Into<PathBuf>) -> Self {
        self.record_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Live counters; clone freely.
    pub fn metrics(&self) -> Metrics {
        self.metrics.clone()
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.stop)
    }

    /// Run to completion. Returns after every stage has exited.
    pub fn run(
        &self,
        source: FrameSource,
        detector: &mut dyn Detector,
        sinks: &mut [&mut dyn TrackSink],
    ) -> Result<RunReport, PipelineError> {
        let cfg = &self.cfg;
        let metrics = &self.metrics;
        let halt = AtomicBool::new(false);
        let fatal: Mutex<Option<String>> = Mutex::new(None);
        let storage: Mutex<Option<String>> = Mutex::new(None);

        let frame_q: BoundedQueue<Imported> = BoundedQueue::new(cfg.frame_queue_capacity, cfg.frame_queue_policy)
            .with_gauge(Arc::clone(&metrics.frame_depth));
        let result_q: BoundedQueue<Processed> = BoundedQueue::new(cfg.result_queue_capacity, OverflowPolicy::Block)
            .with_gauge(Arc::clone(&metrics.result_depth));
        let record_q: BoundedQueue<Frame> = BoundedQueue::new(64, OverflowPolicy::Block);
        let writer = match &self.record_dir {
            Some(dir) => Some(FrameRecordWriter::create(dir)?),
            None => None,
        };
        let skipped = source.skip_counter();
        metrics.start();

        let outcome = std::thread::scope(|s| {
            if let Some(mut w) = writer {
                let (record_q, storage, halt) = (&record_q, &storage, &halt);
                s.spawn(move || {
                    while let Some(f) = record_q.take() {
                        match w.write(&f) {
                            Ok(_) => metrics.recorded(),
                            Err(e) => {
                                warn!("frame recording failed: {e}");
                                *storage.lock().unwrap_or_else(|p| p.into_inner()) = Some(e.to_string());
                                halt.store(true, Ordering::SeqCst);
                                record_q.close();
                                record_q.drain();
                                return;
                            }
                        }
                    }
                });
            }

            let recording = self.record_dir.is_some();
            let (frame_q_ref, record_q_ref, halt_ref) = (&frame_q, &record_q, &halt);
            let stop = &self.stop;
            s.spawn(move || {
                import(source, cfg.input_size, frame_q_ref, recording.then_some(record_q_ref), metrics, stop, halt_ref);
                record_q_ref.close();
            });

            let (result_q_ref, fatal_ref) = (&result_q, &fatal);
            s.spawn(move || {
                let mut stage = DetectStage {
                    det: detector,
                    out: result_q_ref,
                    metrics,
                    conf: cfg.conf_threshold,
                    held: Vec::new(),
                    downstream_closed: false,
                };
                if let Err(message) = stage.run(frame_q_ref, cfg.batch_size, cfg.flush_after(), cfg.skip_interval) {
                    warn!("detector stage stopping: {message}");
                    *fatal_ref.lock().unwrap_or_else(|p| p.into_inner()) = Some(message);
                    halt_ref.store(true, Ordering::SeqCst);
                    frame_q_ref.close();
                    metrics.dropped(frame_q_ref.drain().len() as u64);
                    stage.flush_held();
                }
                // Anything that raced in after the close above.
                metrics.dropped(frame_q_ref.drain().len() as u64);
                result_q_ref.close();
            });

            let r = track(cfg, &result_q, metrics, sinks);
            if r.is_err() {
                halt.store(true, Ordering::SeqCst);
                frame_q.close();
                result_q.close();
                metrics.dropped(result_q.drain().len() as u64);
            }
            r
        });
        metrics.set_source_skipped(skipped.load(Ordering::Relaxed));
        metrics.finish();

        let (tracks, detections) = outcome?;
        if let Some(msg) = storage.into_inner().unwrap_or_else(|p| p.into_inner()) {
            return Err(PipelineError::Storage(msg));
        }
        let status = match fatal.into_inner().unwrap_or_else(|p| p.into_inner()) {
            Some(message) => RunStatus::DetectorFailed { message },
            None if self.stop.load(Ordering::SeqCst) => RunStatus::Stopped,
            None => RunStatus::Completed,
        };
        let m = metrics.snapshot();
        info!(
            "run finished: {} in, {} detected, {} propagated, {} dropped, {:.2} fps",
            m.frames_in, m.frames_detected, m.frames_propagated, m.frames_dropped, m.end_to_end_fps
        );
        Ok(RunReport {
            status,
            metrics: m,
            tracks,
            detections,
        })
    }
}

fn import(
    source: FrameSource,
    input_size: u32,
    out: &BoundedQueue<Imported>,
    record: Option<&BoundedQueue<Frame>>,
    metrics: &Metrics,
    stop: &AtomicBool,
    halt: &AtomicBool,
) {
    for frame in source {
        if stop.load(Ordering::SeqCst) || halt.load(Ordering::SeqCst) {
            break;
        }
        metrics.frame_in();
        if let Some(q) = record {
            let _ = q.offer(frame.clone());
        }
        let resized = match resize_frame(&frame, input_size) {
            Ok(f) => f,
            Err(e) => {
                warn!("frame {}: {e}", frame.frame_id);
                metrics.dropped(1);
                continue;
            }
        };
        match out.offer(Imported {
            frame: resized,
            at: Instant::now(),
        }) {
            Ok(None) => {}
            Ok(Some(_evicted)) => metrics.dropped(1),
            Err(Closed(_)) => {
                metrics.dropped(1);
                break;
            }
        }
    }
    out.close();
}

struct DetectStage<'a> {
    det: &'a mut dyn Detector,
    out: &'a BoundedQueue<Processed>,
    metrics: &'a Metrics,
    conf: f64,
    /// Skipped frames waiting behind a pending batch.
    held: Vec<Imported>,
    downstream_closed: bool,
}

impl DetectStage<'_> {
    /// Returns `Err` with a reason when the stage must stop early.
    fn run(&mut self, input: &BoundedQueue<Imported>, size: usize, flush: std::time::Duration, k: u32) -> Result<(), String> {
        let mut batcher = Batcher::new(size, flush);
        loop {
            if self.downstream_closed {
                self.metrics.dropped(batcher.take().map_or(0, |b| b.len()) as u64);
                return Err("tracker stage stopped".into());
            }
            let next = match batcher.deadline() {
                Some(d) => input.take_until(d),
                None => input.take().map_or(Take::Closed, Take::Item),
            };
            let ready = match next {
                Take::Item(imp) => match skip_decision(imp.frame.frame_id, k) {
                    FrameRole::Detect => batcher.push(imp, Instant::now()),
                    FrameRole::Propagate => {
                        if batcher.is_empty() {
                            self.emit(Processed {
                                frame: imp.frame,
                                dets: None,
                                at: imp.at,
                            });
                        } else {
                            self.held.push(imp);
                        }
                        None
                    }
                },
                Take::Timeout => batcher.poll(Instant::now()),
                Take::Closed => {
                    if let Some(b) = batcher.take() {
                        self.run_batch(b)?;
                    }
                    self.flush_held();
                    return Ok(());
                }
            };
            if let Some(b) = ready {
                if let Err(msg) = self.run_batch(b) {
                    self.metrics.dropped(batcher.take().map_or(0, |b| b.len()) as u64);
                    return Err(msg);
                }
            }
        }
    }

    fn emit(&mut self, p: Processed) {
        if self.downstream_closed || self.out.offer(p).is_err() {
            self.downstream_closed = true;
            self.metrics.dropped(1);
        }
    }

    fn flush_held(&mut self) {
        for imp in std::mem::take(&mut self.held) {
            self.emit(Processed {
                frame: imp.frame,
                dets: None,
                at: imp.at,
            });
        }
    }

    fn run_batch(&mut self, batch: Vec<Imported>) -> Result<(), String> {
        let frames: Vec<Frame> = batch.iter().map(|i| i.frame.clone()).collect();
        let t0 = Instant::now();
        let res = self.det.detect_batch(&frames);
        let mut fatal = None;
        let done: Vec<Processed> = match res {
            Ok(lists) if lists.len() == batch.len() => {
                self.metrics.invocation(t0.elapsed(), true);
                batch
                    .into_iter()
                    .zip(lists)
                    .map(|(imp, l)| Processed {
                        dets: Some(filter_confidence(l, self.conf)),
                        frame: imp.frame,
                        at: imp.at,
                    })
                    .collect()
            }
            Ok(lists) => {
                self.metrics.invocation(t0.elapsed(), false);
                warn!("detector returned {} lists for {} frames; batch dropped", lists.len(), batch.len());
                self.metrics.dropped(batch.len() as u64);
                Vec::new()
            }
            Err(e) => {
                self.metrics.invocation(t0.elapsed(), false);
                warn!("{e}; {} frames dropped", batch.len());
                self.metrics.dropped(batch.len() as u64);
                if e.is_fatal() {
                    fatal = Some(e.to_string());
                }
                Vec::new()
            }
        };
        // Interleave with held skipped frames by frame id.
        let mut held = std::mem::take(&mut self.held).into_iter().peekable();
        for p in done {
            while let Some(h) = held.next_if(|h| h.frame.frame_id < p.frame.frame_id) {
                self.emit(Processed {
                    frame: h.frame,
                    dets: None,
                    at: h.at,
                });
            }
            self.emit(p);
        }
        for h in held {
            self.emit(Processed {
                frame: h.frame,
                dets: None,
                at: h.at,
            });
        }
        fatal.map_or(Ok(()), Err)
    }
}

fn track(
    cfg: &PipelineConfig,
    input: &BoundedQueue<Processed>,
    metrics: &Metrics,
    sinks: &mut [&mut dyn TrackSink],
) -> Result<(Vec<Track>, Predictions), PipelineError> {
    let mut tracker = Tracker::new(cfg.tracker());
    let mut book = TrackBook::new();
    let mut detections = Predictions::new();
    while let Some(p) = input.take() {
        let t0 = Instant::now();
        let events = match tracker.step(&p.frame, p.dets.as_deref()) {
            Ok(ev) => ev,
            Err(e) => {
                metrics.dropped(1);
                return Err(e.into());
            }
        };
        if let Some(d) = &p.dets {
            detections.insert(
                p.frame.frame_id,
                d.iter()
                    .map(|d| Detection::new(d.frame_id, p.frame.to_source(&d.bbox), d.confidence))
                    .collect(),
            );
        }
        for ev in events {
            let ev = ev.map_point(|b| p.frame.to_source(b));
            book.apply(&ev);
            for s in sinks.iter_mut() {
                if let Err(e) = s.on_event(&ev) {
                    metrics.dropped(1);
                    return Err(e.into());
                }
            }
        }
        for s in sinks.iter_mut() {
            if let Err(e) = s.on_frame(&p.frame) {
                metrics.dropped(1);
                return Err(e.into());
            }
        }
        metrics.tracked(p.dets.is_some(), t0.elapsed(), p.at.elapsed());
    }
    for ev in tracker.finish() {
        book.apply(&ev);
        for s in sinks.iter_mut() {
            s.on_event(&ev)?;
        }
    }
    let tracks = book.tracks();
    for s in sinks.iter_mut() {
        s.finish(&tracks)?;
    }
    Ok((tracks, detections))
}

/// Run the configured pipeline over a synthetic scene with the oracle
/// detector and no sinks. Returns the report together with the scene truth.
pub fn run_with_truth(cfg: &PipelineConfig, scene: &SyntheticSpec) -> Result<(RunReport, AnnotationTable), PipelineError> {
    let scene = SyntheticScene::new(scene.clone())?;
    let source = FrameSource::from_scene(scene);
    let truth = source.truth().expect("synthetic scenes carry truth");
    let mut det = build_detector(&PipelineConfig { detector: DetectorKind::Oracle, ..cfg.clone() }, Some(Arc::clone(&truth)))?;
    let report = Pipeline::new(cfg.clone())?.run(source, &mut det, &mut [])?;
    let truth = Arc::try_unwrap(truth).unwrap_or_else(|t| (*t).clone());
    Ok((report, truth))
}
