use std::sync::Arc;
use std::time::Duration;

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{Detection, Detector, DetectorError};
use crate::geometry::BoundingBox;
use crate::ingest::{AnnotationTable, Frame};
use crate::rng::StdRng;

/// How confidences are drawn for replayed boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfidenceLaw {
    /// Confidence of a true box perturbed by the full jitter on every
    /// coordinate; an unperturbed box scores 1.0.
    pub true_floor: f64,
    /// False positives score uniformly in `[0, false_ceiling)`.
    pub false_ceiling: f64,
}

impl Default for ConfidenceLaw {
    fn default() -> Self {
        Self {
            true_floor: 0.5,
            false_ceiling: 0.6,
        }
    }
}

/// Noise applied when replaying ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Half-width of the uniform perturbation applied independently to
    /// x, y, w and h, in frame pixels.
    pub jitter_px: f64,
    pub miss_rate: f64,
    /// Expected false positives per frame (Poisson mean).
    pub fp_rate: f64,
    pub confidence: ConfidenceLaw,
    /// Noise stream seed. Not part of the serialized form; pipelines set it
    /// from their run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::exact()
    }
}

impl NoiseModel {
    pub fn exact() -> Self {
        Self {
            jitter_px: 0.0,
            miss_rate: 0.0,
            fp_rate: 0.0,
            confidence: ConfidenceLaw::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.jitter_px.is_nan() || self.jitter_px < 0.0 {
            return Err(format!("jitter_px must be >= 0, got {}", self.jitter_px));
        }
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(format!("miss_rate must be in [0,1], got {}", self.miss_rate));
        }
        if self.fp_rate.is_nan() || self.fp_rate < 0.0 {
            return Err(format!("fp_rate must be >= 0, got {}", self.fp_rate));
        }
        let c = self.confidence;
        if !(0.0..=1.0).contains(&c.true_floor) || !(0.0..=1.0).contains(&c.false_ceiling) {
            return Err("confidence law bounds must be in [0,1]".into());
        }
        Ok(())
    }
}

/// Replay the truth for one frame through the noise model.
///
/// Randomness is drawn from a stream keyed by `(seed, frame_id)`, so the
/// output does not depend on batch composition or visit order.
pub fn oracle_detect(frame: &Frame, truth: &AnnotationTable, nm: &NoiseModel) -> Vec<Detection> {
    let mut rng = StdRng::for_stream(nm.seed, frame.frame_id);
    let mut out = Vec::new();
    let j = nm.jitter_px;
    for gt in truth.boxes(frame.frame_id) {
        let b = frame.from_source(gt);
        if rng.chance(nm.miss_rate) {
            continue;
        }
        let (bbox, confidence) = if j > 0.0 {
            let d: [f64; 4] = std::array::from_fn(|_| rng.range_f64(-j, j));
            let moved = BoundingBox::new(b.x + d[0], b.y + d[1], (b.w + d[2]).max(1.0), (b.h + d[3]).max(1.0));
            let spread = d.iter().map(|v| v.abs()).sum::<f64>() / (4.0 * j);
            (moved, 1.0 - (1.0 - nm.confidence.true_floor) * spread)
        } else {
            (b, 1.0)
        };
        let bbox = if bbox.intersects_frame(frame.width, frame.height) {
            bbox
        } else {
            bbox.clamped_to(frame.width, frame.height)
        };
        out.push(Detection::new(frame.frame_id, bbox, confidence.clamp(0.0, 1.0)));
    }
    if nm.fp_rate > 0.0 {
        let n = Poisson::new(nm.fp_rate)
            .map(|p| p.sample(rng.inner()) as u64)
            .unwrap_or(0);
        let (fw, fh) = (frame.width as f64, frame.height as f64);
        for _ in 0..n {
            let w = rng.range_f64(16.0, 64.0).min(fw);
            let h = rng.range_f64(16.0, 64.0).min(fh);
            let x = rng.range_f64(0.0, fw - w);
            let y = rng.range_f64(0.0, fh - h);
            let c = rng.range_f64(0.0, nm.confidence.false_ceiling);
            out.push(Detection::new(frame.frame_id, BoundingBox::new(x, y, w, h), c));
        }
    }
    out
}

/// Simulated inference latency: a fixed per-invocation overhead plus a
/// per-image cost proportional to its pixel count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub overhead_ms: f64,
    pub per_image_ms: f64,
    /// Pixel count at which one image costs exactly `per_image_ms`.
    pub reference_pixels: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            overhead_ms: 40.0,
            per_image_ms: 10.0,
            reference_pixels: 1080 * 608,
        }
    }
}

impl CostModel {
    pub fn batch_latency(&self, frames: &[Frame]) -> Duration {
        let images: f64 = frames
            .iter()
            .map(|f| f.pixel_count() as f64 / self.reference_pixels.max(1) as f64)
            .sum();
        let ms = self.overhead_ms + self.per_image_ms * images;
        Duration::from_secs_f64(ms.max(0.0) / 1000.0)
    }
}

/// Ground-truth replay backend. Stateless after construction apart from the
/// optional simulated latency.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    truth: Arc<AnnotationTable>,
    noise: NoiseModel,
    cost: Option<CostModel>,
}

impl OracleDetector {
    pub fn new(truth: Arc<AnnotationTable>, noise: NoiseModel) -> Self {
        Self {
            truth,
            noise,
            cost: None,
        }
    }

    pub fn with_cost(mut self, cost: Option<CostModel>) -> Self {
        self.cost = cost;
        self
    }
}

impl Detector for OracleDetector {
    fn detect_batch(&mut self, frames: &[Frame]) -> Result<Vec<Vec<Detection>>, DetectorError> {
        if frames.is_empty() {
            return Err(DetectorError::EmptyBatch);
        }
        if let Some(cost) = &self.cost {
            std::thread::sleep(cost.batch_latency(frames));
        }
        Ok(frames
            .iter()
            .map(|f| oracle_detect(f, &self.truth, &self.noise))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    fn blank(id: u64, w: u32, h: u32) -> Frame {
        Frame::new(id, 0, w, h, vec![0; (w * h * 3) as usize], "mem").unwrap()
    }

    fn table(frame_id: u64, boxes: Vec<BoundingBox>) -> AnnotationTable {
        let mut t = AnnotationTable::new();
        t.insert(frame_id, boxes);
        t
    }

    #[test]
    fn zero_noise_is_identity() {
        let boxes = vec![BoundingBox::new(10.0, 10.0, 20.0, 30.0), BoundingBox::new(50.0, 5.0, 8.0, 8.0)];
        let t = table(3, boxes.clone());
        let dets = oracle_detect(&blank(3, 100, 80), &t, &NoiseModel::exact());
        assert_eq!(dets.len(), 2);
        for (d, b) in dets.iter().zip(&boxes) {
            assert_eq!(d.bbox, *b);
            assert_eq!(d.confidence, 1.0);
            assert_eq!(d.frame_id, 3);
        }
        assert!(oracle_detect(&blank(4, 100, 80), &t, &NoiseModel::exact()).is_empty());
    }

    #[test]
    fn boxes_follow_resize_scale() {
        let t = table(0, vec![BoundingBox::new(100.0, 40.0, 20.0, 20.0)]);
        let mut f = blank(0, 50, 25);
        f.scale_x = 0.25;
        f.scale_y = 0.25;
        let d = oracle_detect(&f, &t, &NoiseModel::exact());
        assert_eq!(d[0].bbox, BoundingBox::new(25.0, 10.0, 5.0, 5.0));
    }

    #[test]
    fn per_frame_seeding_is_stable() {
        let nm = NoiseModel {
            jitter_px: 3.0,
            miss_rate: 0.3,
            fp_rate: 1.5,
            seed: 99,
            ..NoiseModel::exact()
        };
        let t = table(7, vec![BoundingBox::new(10.0, 10.0, 40.0, 40.0); 5]);
        let f = blank(7, 200, 200);
        assert_eq!(oracle_detect(&f, &t, &nm), oracle_detect(&f, &t, &nm));
        let mut det = OracleDetector::new(Arc::new(t.clone()), nm);
        let alone = det.detect_batch(std::slice::from_ref(&f)).unwrap();
        let batched = det.detect_batch(&[blank(6, 200, 200), f.clone(), blank(8, 200, 200)]).unwrap();
        assert_eq!(alone[0], batched[1]);
    }

    #[test]
    fn miss_rate_binomial_bound() {
        // 1000 boxes, p = 0.5: mean 500, sd ~15.8; [420, 580] is > 5 sd.
        let nm = NoiseModel {
            miss_rate: 0.5,
            seed: 2024,
            ..NoiseModel::exact()
        };
        let mut t = AnnotationTable::new();
        for id in 0..100 {
            t.insert(id, (0..10).map(|i| BoundingBox::new(i as f64 * 20.0, 10.0, 15.0, 15.0)).collect());
        }
        let kept: usize = (0..100).map(|id| oracle_detect(&blank(id, 220, 40), &t, &nm).len()).sum();
        assert!((420..=580).contains(&kept), "kept {kept}");
    }

    /// Worst IoU of a 40x40 box under independent perturbations of up to
    /// `j` pixels on x, y, w, h, searched on a grid that includes the corners.
    fn worst_case_iou(j: f64) -> f64 {
        let steps: Vec<f64> = (0..=8).map(|i| -j + i as f64 * j / 4.0).collect();
        let base = BoundingBox::new(100.0, 100.0, 40.0, 40.0);
        let mut worst = 1.0f64;
        for &dx in &steps {
            for &dy in &steps {
                for &dw in &steps {
                    for &dh in &steps {
                        let b = BoundingBox::new(base.x + dx, base.y + dy, base.w + dw, base.h + dh);
                        worst = worst.min(iou(&base, &b));
                    }
                }
            }
        }
        worst
    }

    #[test]
    fn jitter_two_keeps_iou_above_point_seven() {
        let worst = worst_case_iou(2.0);
        // Shift by -2 and shrink by 2 on both axes: 36^2 / (1600 + 38^2 - 36^2).
        assert!((worst - 1296.0 / 1748.0).abs() < 1e-12, "{worst}");
        assert!(worst >= 0.7);

        let nm = NoiseModel {
            jitter_px: 2.0,
            seed: 5,
            ..NoiseModel::exact()
        };
        let mut t = AnnotationTable::new();
        for id in 0..200 {
            t.insert(id, vec![BoundingBox::new(50.0, 60.0, 40.0 + (id % 30) as f64, 40.0)]);
        }
        for id in 0..200 {
            let d = oracle_detect(&blank(id, 300, 300), &t, &nm);
            assert_eq!(d.len(), 1);
            let v = iou(&d[0].bbox, &t.boxes(id)[0]);
            assert!(v >= 0.7, "frame {id}: iou {v}");
            assert!(d[0].confidence >= 0.5 && d[0].confidence <= 1.0);
        }
    }

    #[test]
    fn false_positive_rate_and_confidence_ceiling() {
        let nm = NoiseModel {
            fp_rate: 2.0,
            seed: 1,
            ..NoiseModel::exact()
        };
        let t = AnnotationTable::new();
        let total: usize = (0..500)
            .map(|id| {
                let d = oracle_detect(&blank(id, 320, 240), &t, &nm);
                assert!(d.iter().all(|x| x.confidence < 0.6 && x.bbox.right() <= 320.0));
                d.len()
            })
            .sum();
        // Poisson(2) x 500: mean 1000, sd ~31.6.
        assert!((850..=1150).contains(&total), "{total}");
    }

    #[test]
    fn cost_model_latency() {
        let c = CostModel {
            overhead_ms: 40.0,
            per_image_ms: 10.0,
            reference_pixels: 100,
        };
        let frames = vec![blank(0, 10, 10), blank(1, 10, 5)];
        assert_eq!(c.batch_latency(&frames), Duration::from_millis(55));
    }

    #[test]
    fn noise_validation() {
        assert!(NoiseModel::exact().validate().is_ok());
        assert!(NoiseModel { miss_rate: 1.5, ..NoiseModel::exact() }.validate().is_err());
        assert!(NoiseModel { fp_rate: -0.1, ..NoiseModel::exact() }.validate().is_err());
        assert!(NoiseModel { jitter_px: f64::NAN, ..NoiseModel::exact() }.validate().is_err());
    }
}
