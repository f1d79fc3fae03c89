//! Scoring against ground truth: greedy matching, F2 over an IoU sweep, and
//! the frame-skipping experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Detection;
use crate::geometry::BoundingBox;
use crate::ingest::{AnnotationTable, SyntheticSpec};
use crate::pipeline::{run_with_truth, PipelineConfig, PipelineError};
use crate::tracker::Track;

pub use crate::geometry::iou;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("frames {0:?} have output but no ground truth")]
    MissingTruth(Vec<u64>),
    #[error("empty threshold sweep")]
    NoThresholds,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Per-frame predictions in original capture coordinates.
pub type Predictions = BTreeMap<u64, Vec<Detection>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Greedy one-frame matching: predictions in descending confidence (ties by
/// input order) each claim the highest-IoU unclaimed truth box with IoU of at
/// least `tau`.
pub fn match_detections(preds: &[Detection], gts: &[BoundingBox], tau: f64) -> MatchCounts {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tp = 0u64;
    for pi in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = iou(&preds[pi].bbox, g);
            if v > 0.0 && v >= tau && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            tp += 1;
        }
    }
    MatchCounts {
        tp,
        fp: preds.len() as u64 - tp,
        fn_: gts.len() as u64 - tp,
    }
}

/// F-beta with beta = 2. Zero when there are errors but no true positives,
/// one when there is nothing to find and nothing was predicted.
pub fn f2_score(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    // 5PR / (4P + R) with P and R expanded, exact for integer counts.
    (5 * tp) as f64 / (5 * tp + 4 * fn_ + fp) as f64
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// IoU thresholds 0.30, 0.35, ..., 0.80.
pub fn default_sweep() -> Vec<f64> {
    (0..=10).map(|i| (30 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Detections,
    /// Every track point counts as a detection, propagated ones included.
    Tracks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub iou_threshold: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub frames_evaluated: usize,
    pub rows: Vec<ThresholdRow>,
    pub mean_f2: f64,
    pub end_to_end_fps: Option<f64>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn row(&self, tau: f64) -> Option<&ThresholdRow> {
        self.rows.iter().find(|r| (r.iou_threshold - tau).abs() < 1e-9)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6} {:>7} {:>7} {:>7} {:>9} {:>7} {:>6}", "iou", "tp", "fp", "fn", "precision", "recall", "f2");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6.2} {:>7} {:>7} {:>7} {:>9.3} {:>7.3} {:>6.3}",
                r.iou_threshold, r.tp, r.fp, r.fn_, r.precision, r.recall, r.f2
            );
        }
        let _ = writeln!(s, "mean F2 {:.3} over {} frames", self.mean_f2, self.frames_evaluated);
        if let Some(fps) = self.end_to_end_fps {
            let _ = writeln!(s, "end-to-end FPS {fps:.2}");
        }
        s
    }
}

/// Flatten track points into per-frame predictions.
pub fn predictions_from_tracks(tracks: &[Track]) -> Predictions {
    let mut out = Predictions::new();
    for t in tracks {
        for p in &t.points {
            out.entry(p.frame_id)
                .or_default()
                .push(Detection::new(p.frame_id, p.bbox, p.confidence));
        }
    }
    out
}

/// Corpus-level scoring: counts are summed over every frame the truth
/// covers, then turned into precision, recall and F2 per threshold.
pub fn evaluate_run(preds: &Predictions, truth: &AnnotationTable, thresholds: &[f64], mode: EvalMode) -> Result<EvalReport, EvalError> {
    if thresholds.is_empty() {
        return Err(EvalError::NoThresholds);
    }
    let missing: Vec<u64> = preds
        .iter()
        .filter(|(id, dets)| !dets.is_empty() && !truth.covers(**id))
        .map(|(id, _)| *id)
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingTruth(missing));
    }
    let rows: Vec<ThresholdRow> = thresholds
        .iter()
        .map(|&tau| {
            let mut c = MatchCounts::default();
            for (id, gts) in truth.iter() {
                let p = preds.get(&id).map(Vec::as_slice).unwrap_or(&[]);
                c += match_detections(p, gts, tau);
            }
            ThresholdRow {
                iou_threshold: tau,
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                precision: ratio(c.tp, c.tp + c.fp),
                recall: ratio(c.tp, c.tp + c.fn_),
                f2: f2_score(c.tp, c.fp, c.fn_),
            }
        })
        .collect();
    let mean_f2 = rows.iter().map(|r| r.f2).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        mode,
        frames_evaluated: truth.len(),
        rows,
        mean_f2,
        end_to_end_fps: None,
        config: serde_json::Value::Null,
    })
}

/// Aligned `configuration | F2 | FPS` table.
pub fn render_table(rows: &[(String, f64, f64)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("configuration".len());
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$} | {:>6} | {:>7}", "configuration", "F2", "FPS");
    let _ = writeln!(s, "{}-+-{}-+-{}", "-".repeat(width), "-".repeat(6), "-".repeat(7));
    for (name, f2, fps) in rows {
        let _ = writeln!(s, "{name:<width$} | {f2:>6.3} | {fps:>7.2}");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRow {
    pub k: u32,
    pub mean_f2: f64,
    pub recall_at_05: f64,
    pub frames: u64,
    pub frames_detected: u64,
    pub detector_invocations: u64,
    /// Frames per detector frame: how much inference the setting saves.
    pub frames_per_detection: f64,
    pub end_to_end_fps: f64,
}

/// Run the full pipeline over one synthetic scene for each skip interval and
/// score the tracks (propagated points included) against the scene truth.
pub fn skip_loss_experiment(scene: &SyntheticSpec, ks: &[u32], base: &PipelineConfig) -> Result<Vec<SkipRow>, EvalError> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let cfg = PipelineConfig {
            skip_interval: k,
            ..base.clone()
        };
        let (report, truth) = run_with_truth(&cfg, scene)?;
        let preds = predictions_from_tracks(&report.tracks);
        let mut sweep = default_sweep();
        sweep.push(0.5);
        let eval = evaluate_run(&preds, &truth, &sweep, EvalMode::Tracks)?;
        let n = sweep.len() - 1;
        let mean_f2 = eval.rows[..n].iter().map(|r| r.f2).sum::<f64>() / n as f64;
        let m = &report.metrics;
        rows.push(SkipRow {
            k,
            mean_f2,
            recall_at_05: eval.rows[n].recall,
            frames: m.frames_in,
            frames_detected: m.frames_detected,
            detector_invocations: m.detector_invocations,
            frames_per_detection: ratio(m.frames_in, m.frames_detected),
            end_to_end_fps: m.end_to_end_fps,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(x: f64, y: f64, w: f64, h: f64, c: f64) -> Detection {
        Detection::new(0, BoundingBox::new(x, y, w, h), c)
    }

    #[test]
    fn f2_reference_values() {
        assert_eq!(f2_score(5, 0, 0), 1.0);
        // P = 0.75, R = 0.6: 5 * 0.45 / 3.6
        assert_eq!(f2_score(3, 1, 2), 0.625);
        assert_eq!(f2_score(0, 5, 5), 0.0);
        assert_eq!(f2_score(0, 0, 0), 1.0);
    }

    #[test]
    fn exact_predictions_are_all_tp() {
        let gts = vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0), BoundingBox::new(30.0, 30.0, 5.0, 5.0)];
        let preds: Vec<Detection> = gts.iter().map(|g| Detection::new(0, *g, 0.7)).collect();
        assert_eq!(match_detections(&preds, &gts, 0.5), MatchCounts { tp: 2, fp: 0, fn_: 0 });
        assert_eq!(match_detections(&[], &[gts[0]; 3], 0.5), MatchCounts { tp: 0, fp: 0, fn_: 3 });
    }

    #[test]
    fn duplicate_prediction_is_fp() {
        let gt = [BoundingBox::new(0.0, 0.0, 10.0, 10.0)];
        // IoU 0.8 and 0.6 against the same truth box.
        let preds = [det(10.0 / 9.0, 0.0, 10.0, 10.0, 0.9), det(2.5, 0.0, 10.0, 10.0, 0.8)];
        assert_eq!(match_detections(&preds, &gt, 0.5), MatchCounts { tp: 1, fp: 1, fn_: 0 });
    }

    #[test]
    fn empty_output_scores_zero_and_unknown_frames_rejected() {
        let mut truth = AnnotationTable::new();
        truth.insert(0, vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0)]);
        truth.insert(1, vec![]);
        let r = evaluate_run(&Predictions::new(), &truth, &default_sweep(), EvalMode::Detections).unwrap();
        assert_eq!(r.mean_f2, 0.0);
        assert_eq!(r.frames_evaluated, 2);

        let mut preds = Predictions::new();
        preds.insert(7, vec![det(0.0, 0.0, 1.0, 1.0, 1.0)]);
        match evaluate_run(&preds, &truth, &[0.5], EvalMode::Detections) {
            Err(EvalError::MissingTruth(ids)) => assert_eq!(ids, vec![7]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sweep_values() {
        let s = default_sweep();
        assert_eq!(s.len(), 11);
        assert_eq!(s[0], 0.3);
        assert_eq!(s[4], 0.5);
        assert_eq!(s[10], 0.8);
    }

    #[test]
    fn table_alignment() {
        let t = render_table(&[("batch 1, 1080".into(), 0.56, 2.0), ("batch 4, 720".into(), 0.53, 14.0)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
        assert!(lines[2].contains("0.560") && lines[3].contains("14.00"));
    }

    proptest! {
        #[test]
        fn f2_monotone(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
            let f = f2_score(tp, fp, fn_);
            prop_assert!((0.0..=1.0).contains(&f));
            if tp + fp + fn_ > 0 {
                prop_assert!(f2_score(tp + 1, fp, fn_) >= f - 1e-12);
            }
            if tp > 0 {
                prop_assert!(f2_score(tp, fp + 1, fn_) <= f + 1e-12);
                prop_assert!(f2_score(tp, fp, fn_ + 1) <= f + 1e-12);
            }
        }

        #[test]
        fn f2_non_increasing_in_threshold(
            g in proptest::collection::vec((0.0f64..80.0, 0.0f64..80.0, 6.0f64..30.0, 6.0f64..30.0), 0..7),
            p in proptest::collection::vec((0.0f64..80.0, 0.0f64..80.0, 6.0f64..30.0, 6.0f64..30.0, 0.0f64..1.0), 0..7),
        ) {
            let gts: Vec<BoundingBox> = g.iter().map(|&(x, y, w, h)| BoundingBox::new(x, y, w, h)).collect();
            let preds: Vec<Detection> = p.iter().map(|&(x, y, w, h, c)| det(x, y, w, h, c)).collect();
            let mut truth = AnnotationTable::new();
            truth.insert(0, gts);
            let mut pm = Predictions::new();
            pm.insert(0, preds);
            let r = evaluate_run(&pm, &truth, &default_sweep(), EvalMode::Detections).unwrap();
            for w in r.rows.windows(2) {
                prop_assert!(w[1].f2 <= w[0].f2 + 1e-12, "{:?}", r.rows);
            }
        }
    }
}
