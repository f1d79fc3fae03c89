use std::num::NonZeroUsize;
use std::sync::Mutex;

use lru::LruCache;
use serde::Serialize;

use super::{Provenance, Track};
use crate::ingest::Frame;

/// Anything that can hand out frames by id.
pub trait FrameLookup: Send + Sync {
    fn frame(&self, frame_id: u64) -> Option<Frame>;
}

/// Bounded LRU of recent frames keyed by `frame_id`.
pub struct FrameStore {
    inner: Mutex<LruCache<u64, Frame>>,
}

impl FrameStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::new(LruCache::new(NonZeroUsize::new(capacity.max(1)).expect("non-zero"))),
        }
    }

    pub fn insert(&self, frame: Frame) {
        self.inner.lock().expect("frame store poisoned").put(frame.frame_id, frame);
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("frame store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameLookup for FrameStore {
    fn frame(&self, frame_id: u64) -> Option<Frame> {
        self.inner.lock().expect("frame store poisoned").get(&frame_id).cloned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CropImage {
    /// Crop rectangle on the stored frame's pixel grid.
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    #[serde(skip)]
    pub pixels: Vec<u8>,
}

impl CropImage {
    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width, self.height, self.pixels.clone()).expect("crop buffer sized")
    }
}

/// One tile of a track summary; `image` is `None` when the frame is no
/// longer available.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Crop {
    pub frame_id: u64,
    pub provenance: Provenance,
    pub confidence: f64,
    pub image: Option<CropImage>,
}

impl Crop {
    pub fn is_placeholder(&self) -> bool {
        self.image.is_none()
    }
}

/// Up to `n` evenly spaced point indices, always including the first and
/// last detected points.
pub fn summary_indices(track: &Track, n: usize) -> Vec<usize> {
    let len = track.points.len();
    if len == 0 || n == 0 {
        return Vec::new();
    }
    if len <= n {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = if n == 1 {
        vec![0]
    } else {
        (0..n).map(|i| (i * (len - 1) + (n - 1) / 2) / (n - 1)).collect()
    };
    let detected = |p: &super::TrackPoint| p.provenance == Provenance::Detected;
    let first_det = track.points.iter().position(detected);
    let last_det = track.points.iter().rposition(detected);
    let mut pinned: Vec<usize> = Vec::new();
    for must in [first_det, last_det].into_iter().flatten() {
        if idx.contains(&must) {
            pinned.push(must);
            continue;
        }
        // Replace the nearest unpinned index.
        if let Some(slot) = idx
            .iter()
            .enumerate()
            .filter(|(_, v)| !pinned.contains(v))
            .min_by_key(|(_, v)| v.abs_diff(must))
            .map(|(i, _)| i)
        {
            idx[slot] = must;
            pinned.push(must);
        }
    }
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Padded crops (20% of the box per side, clamped to the frame) of up to
/// `n` points of a track whose boxes are in original capture coordinates.
pub fn summarize_track(track: &Track, frames: &dyn FrameLookup, n: usize) -> Vec<Crop> {
    summary_indices(track, n)
        .into_iter()
        .map(|i| {
            let p = &track.points[i];
            Crop {
                frame_id: p.frame_id,
                provenance: p.provenance,
                confidence: p.confidence,
                image: frames.frame(p.frame_id).and_then(|f| crop_padded(&f, &f.from_source(&p.bbox))),
            }
        })
        .collect()
}

fn crop_padded(frame: &Frame, b: &crate::geometry::BoundingBox) -> Option<CropImage> {
    let (px, py) = (0.2 * b.w, 0.2 * b.h);
    let x0 = ((b.x - px).floor().max(0.0) as u32).min(frame.width);
    let y0 = ((b.y - py).floor().max(0.0) as u32).min(frame.height);
    let x1 = ((b.right() + px).ceil().max(0.0) as u32).min(frame.width);
    let y1 = ((b.bottom() + py).ceil().max(0.0) as u32).min(frame.height);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    let (w, h) = (x1 - x0, y1 - y0);
    let row = frame.width as usize * 3;
    let mut pixels = Vec::with_capacity(w as usize * h as usize * 3);
    for y in y0..y1 {
        let start = y as usize * row + x0 as usize * 3;
        pixels.extend_from_slice(&frame.pixels[start..start + w as usize * 3]);
    }
    Some(CropImage {
        x: x0,
        y: y0,
        width: w,
        height: h,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::tracker::{ReviewLabel, TrackPoint, TrackState};

    fn track(n: usize, provenance: impl Fn(usize) -> Provenance) -> Track {
        Track {
            track_id: 0,
            state: TrackState::Finalized,
            review_label: ReviewLabel::Unreviewed,
            points: (0..n)
                .map(|i| TrackPoint {
                    frame_id: i as u64,
                    bbox: BoundingBox::new(100.0, 100.0, 40.0, 40.0),
                    confidence: 0.9,
                    provenance: provenance(i),
                })
                .collect(),
            misses: 0,
        }
    }

    fn store(frames: impl IntoIterator<Item = u64>) -> FrameStore {
        let s = FrameStore::new(600);
        for id in frames {
            s.insert(Frame::new(id, 0, 300, 300, vec![50; 300 * 300 * 3], "mem").unwrap());
        }
        s
    }

    #[test]
    fn short_track_gets_all_points() {
        let t = track(3, |_| Provenance::Detected);
        assert_eq!(summarize_track(&t, &store(0..3), 8).len(), 3);
    }

    #[test]
    fn long_track_spaced_with_both_ends() {
        let t = track(100, |_| Provenance::Detected);
        let idx = summary_indices(&t, 8);
        assert_eq!(idx.len(), 8);
        assert_eq!(idx[0], 0);
        assert_eq!(idx[7], 99);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn first_and_last_detected_pinned() {
        // Detected only at 5 and 93; ends are propagated.
        let t = track(100, |i| if i == 5 || i == 93 { Provenance::Detected } else { Provenance::Propagated });
        let idx = summary_indices(&t, 8);
        assert!(idx.contains(&5) && idx.contains(&93), "{idx:?}");
        assert!(idx.len() <= 8);
    }

    #[test]
    fn padding_adds_twenty_percent_per_side() {
        let t = track(1, |_| Provenance::Detected);
        let crops = summarize_track(&t, &store([0]), 8);
        let img = crops[0].image.as_ref().unwrap();
        assert_eq!((img.width, img.height), (56, 56));
        assert_eq!((img.x, img.y), (92, 92));
        assert_eq!(img.pixels.len(), 56 * 56 * 3);
    }

    #[test]
    fn crop_clamped_at_edge() {
        let mut t = track(1, |_| Provenance::Detected);
        t.points[0].bbox = BoundingBox::new(0.0, 280.0, 40.0, 20.0);
        let crops = summarize_track(&t, &store([0]), 8);
        let img = crops[0].image.as_ref().unwrap();
        assert_eq!((img.x, img.y), (0, 276));
        assert_eq!((img.width, img.height), (48, 24));
    }

    #[test]
    fn evicted_frame_becomes_placeholder() {
        let t = track(3, |_| Provenance::Detected);
        let s = FrameStore::new(2);
        for id in 0..3 {
            s.insert(Frame::new(id, 0, 300, 300, vec![0; 300 * 300 * 3], "mem").unwrap());
        }
        let crops = summarize_track(&t, &s, 8);
        assert_eq!(crops.len(), 3);
        assert!(crops[0].is_placeholder());
        assert!(!crops[2].is_placeholder());
    }

    #[test]
    fn crops_follow_frame_scale() {
        let t = track(1, |_| Provenance::Detected);
        let s = FrameStore::new(4);
        let mut f = Frame::new(0, 0, 150, 150, vec![0; 150 * 150 * 3], "mem").unwrap();
        f.scale_x = 0.5;
        f.scale_y = 0.5;
        s.insert(f);
        let img = summarize_track(&t, &s, 8)[0].image.clone().unwrap();
        assert_eq!((img.x, img.y, img.width, img.height), (46, 46, 28, 28));
    }
}
