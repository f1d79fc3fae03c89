use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

const WINDOW: usize = 2048;

#[derive(Debug, Default)]
struct LatencyWindow {
    samples: VecDeque<f64>,
    total: u64,
}

impl LatencyWindow {
    fn record(&mut self, d: Duration) {
        if self.samples.len() == WINDOW {
            self.samples.pop_front();
        }
        self.samples.push_back(d.as_secs_f64() * 1000.0);
        self.total += 1;
    }

    fn stats(&self) -> LatencyStats {
        if self.samples.is_empty() {
            return LatencyStats::default();
        }
        let mut v: Vec<f64> = self.samples.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len());
        LatencyStats {
            samples: self.total,
            mean_ms: mean,
            p95_ms: v[rank - 1],
        }
    }
}

/// Mean and 95th percentile over the most recent samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: u64,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatencies {
    /// Per detector invocation.
    pub detector: LatencyStats,
    /// Per tracker step.
    pub tracker: LatencyStats,
    /// From import to the end of tracking, per frame.
    pub end_to_end: LatencyStats,
}

#[derive(Debug, Default)]
struct Counters {
    frames_in: u64,
    frames_detected: u64,
    frames_propagated: u64,
    frames_dropped: u64,
    frames_recorded: u64,
    source_skipped: u64,
    detector_invocations: u64,
    detector_failures: u64,
    detector: LatencyWindow,
    tracker: LatencyWindow,
    end_to_end: LatencyWindow,
    started: Option<Instant>,
    finished: Option<Instant>,
}

/// Point-in-time copy of a run's counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub frames_in: u64,
    pub frames_detected: u64,
    pub frames_propagated: u64,
    pub frames_dropped: u64,
    pub frames_recorded: u64,
    /// Source entries that could not be decoded.
    pub source_skipped: u64,
    pub detector_invocations: u64,
    pub detector_failures: u64,
    pub frame_queue_depth: usize,
    pub result_queue_depth: usize,
    pub elapsed_ms: f64,
    /// Frames that reached the tracker per second of wall time.
    pub end_to_end_fps: f64,
    pub latency: StageLatencies,
    pub running: bool,
}

impl StageMetrics {
    /// Every imported frame was detected, propagated or dropped exactly once.
    pub fn is_conserved(&self) -> bool {
        self.frames_in == self.frames_detected + self.frames_propagated + self.frames_dropped
    }
}

/// Shared, thread-safe run counters.
#[derive(Debug, Clone)]
pub struct Metrics {
    inner: Arc<Mutex<Counters>>,
    pub(crate) frame_depth: Arc<AtomicUsize>,
    pub(crate) result_depth: Arc<AtomicUsize>,
}

impl Default for Metrics {
    fn default() -> Self {
        Self::new()
    }
}

impl Metrics {
    pub fn new() -> Self {
        Self {
            inner: Arc::default(),
            frame_depth: Arc::default(),
            result_depth: Arc::default(),
        }
    }

    fn with<R>(&self, f: impl FnOnce(&mut Counters) -> R) -> R {
        f(&mut self.inner.lock().unwrap_or_else(|p| p.into_inner()))
    }

    pub(crate) fn frame_in(&self) {
        self.with(|c| c.frames_in += 1);
    }

    pub(crate) fn dropped(&self, n: u64) {
        self.with(|c| c.frames_dropped += n);
    }

    pub(crate) fn recorded(&self) {
        self.with(|c| c.frames_recorded += 1);
    }

    pub(crate) fn set_source_skipped(&self, n: u64) {
        self.with(|c| c.source_skipped = n);
    }

    pub(crate) fn invocation(&self, latency: Duration, ok: bool) {
        self.with(|c| {
            c.detector_invocations += 1;
            if !ok {
                c.detector_failures += 1;
            }
            c.detector.record(latency);
        });
    }

    pub(crate) fn tracked(&self, detected: bool, step: Duration, end_to_end: Duration) {
        self.with(|c| {
            if detected {
                c.frames_detected += 1;
            } else {
                c.frames_propagated += 1;
            }
            c.tracker.record(step);
            c.end_to_end.record(end_to_end);
        });
    }

    pub(crate) fn start(&self) {
        self.with(|c| {
            c.started.get_or_insert_with(Instant::now);
        });
    }

    pub(crate) fn finish(&self) {
        self.with(|c| {
            c.finished.get_or_insert_with(Instant::now);
        });
    }

    pub fn snapshot(&self) -> StageMetrics {
        self.with(|c| {
            let end = c.finished.unwrap_or_else(Instant::now);
            let elapsed = c.started.map_or(0.0, |t| end.duration_since(t).as_secs_f64());
            let tracked = c.frames_detected + c.frames_propagated;
            StageMetrics {
                frames_in: c.frames_in,
                frames_detected: c.frames_detected,
                frames_propagated: c.frames_propagated,
                frames_dropped: c.frames_dropped,
                frames_recorded: c.frames_recorded,
                source_skipped: c.source_skipped,
                detector_invocations: c.detector_invocations,
                detector_failures: c.detector_failures,
                frame_queue_depth: self.frame_depth.load(Ordering::Relaxed),
                result_queue_depth: self.result_depth.load(Ordering::Relaxed),
                elapsed_ms: elapsed * 1000.0,
                end_to_end_fps: if elapsed > 0.0 { tracked as f64 / elapsed } else { 0.0 },
                latency: StageLatencies {
                    detector: c.detector.stats(),
                    tracker: c.tracker.stats(),
                    end_to_end: c.end_to_end.stats(),
                },
                running: c.started.is_some() && c.finished.is_none(),
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_uses_nearest_rank() {
        let mut w = LatencyWindow::default();
        for ms in 1..=100 {
            w.record(Duration::from_millis(ms));
        }
        let s = w.stats();
        assert_eq!(s.samples, 100);
        assert!((s.mean_ms - 50.5).abs() < 1e-9);
        assert!((s.p95_ms - 95.0).abs() < 1e-9);
    }

    #[test]
    fn window_bounded_but_total_kept() {
        let mut w = LatencyWindow::default();
        for _ in 0..(WINDOW + 10) {
            w.record(Duration::from_millis(1));
        }
        assert_eq!(w.samples.len(), WINDOW);
        assert_eq!(w.stats().samples, (WINDOW + 10) as u64);
    }

    #[test]
    fn snapshot_counts_and_freezes() {
        let m = Metrics::new();
        m.start();
        for _ in 0..3 {
            m.frame_in();
        }
        m.tracked(true, Duration::ZERO, Duration::ZERO);
        m.tracked(false, Duration::ZERO, Duration::ZERO);
        m.dropped(1);
        m.finish();
        let a = m.snapshot();
        assert!(a.is_conserved());
        assert!(!a.running);
        std::thread::sleep(Duration::from_millis(5));
        assert_eq!(m.snapshot().elapsed_ms, a.elapsed_ms);
    }
}
