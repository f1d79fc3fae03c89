//! Seeded generator of textured rectangles moving over a textured background.
//!
//! Every object bounces inside its own grid cell, so objects never overlap and
//! their per-frame displacement is an integer vector bounded by `max_speed`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{interpolate_geo, AnnotationTable, Frame, GeoFix, IngestError, Result};
use crate::geometry::BoundingBox;
use crate::rng::{hash_words, StdRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub frames: u64,
    pub width: u32,
    pub height: u32,
    pub objects: usize,
    /// Largest per-axis displacement per frame, pixels.
    pub max_speed: i32,
    pub min_size: u32,
    pub max_size: u32,
    pub frame_interval_ms: i64,
    pub start_ms: i64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 100,
            width: 320,
            height: 240,
            objects: 3,
            max_speed: 2,
            min_size: 24,
            max_size: 40,
            frame_interval_ms: 33,
            start_ms: 1_600_000_000_000,
        }
    }
}

#[derive(Debug, Clone)]
struct Trajectory {
    w: u32,
    h: u32,
    positions: Vec<(i32, i32)>,
    /// RGB texture, `w * h * 3` bytes.
    sprite: Vec<u8>,
}

/// Precomputed scene: object trajectories for every frame plus the GPS track.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    spec: SyntheticSpec,
    objects: Vec<Trajectory>,
    fixes: Vec<GeoFix>,
    background: Arc<[u8]>,
}

const BG_SALT: u64 = 0x6267_7465_7874;
const OBJ_SALT: u64 = 0x6f62_6a74_6578;

impl SyntheticScene {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        if spec.width == 0 || spec.height == 0 {
            return Err(IngestError::Descriptor("synthetic frame size must be positive".into()));
        }
        if spec.min_size == 0 || spec.min_size > spec.max_size {
            return Err(IngestError::Descriptor("synthetic object sizes must satisfy 0 < min <= max".into()));
        }
        if spec.max_speed < 0 {
            return Err(IngestError::Descriptor("max_speed must be non-negative".into()));
        }
        let n = spec.objects;
        let cols = (n as f64).sqrt().ceil().max(1.0) as u32;
        let rows = (n as u32).div_ceil(cols).max(1);
        let cell_w = spec.width / cols;
        let cell_h = spec.height / rows;
        let need = spec.max_size + 2 * spec.max_speed as u32 + 2;
        if n > 0 && (cell_w < need || cell_h < need) {
            return Err(IngestError::Descriptor(format!(
                "{n} objects of size up to {} do not fit a {}x{} frame",
                spec.max_size, spec.width, spec.height
            )));
        }

        let mut rng = StdRng::seeded(spec.seed);
        let mut objects = Vec::with_capacity(n);
        for i in 0..n as u32 {
            let (cx0, cy0) = ((i % cols * cell_w) as i32, (i / cols * cell_h) as i32);
            let (cx1, cy1) = (cx0 + cell_w as i32, cy0 + cell_h as i32);
            let w = rng.range_u32(spec.min_size, spec.max_size);
            let h = rng.range_u32(spec.min_size, spec.max_size);
            let mut x = cx0 + rng.range_u32(0, cell_w - w) as i32;
            let mut y = cy0 + rng.range_u32(0, cell_h - h) as i32;
            let s = spec.max_speed;
            let (mut vx, mut vy) = (rng.range_i32(-s, s), rng.range_i32(-s, s));
            while s > 0 && vx == 0 && vy == 0 {
                vx = rng.range_i32(-s, s);
                vy = rng.range_i32(-s, s);
            }
            let mut positions = Vec::with_capacity(spec.frames as usize);
            for _ in 0..spec.frames {
                positions.push((x, y));
                x += vx;
                if x < cx0 {
                    x = 2 * cx0 - x;
                    vx = -vx;
                } else if x + w as i32 > cx1 {
                    x = 2 * (cx1 - w as i32) - x;
                    vx = -vx;
                }
                y += vy;
                if y < cy0 {
                    y = 2 * cy0 - y;
                    vy = -vy;
                } else if y + h as i32 > cy1 {
                    y = 2 * (cy1 - h as i32) - y;
                    vy = -vy;
                }
            }
            let mut sprite = Vec::with_capacity(w as usize * h as usize * 3);
            for v in 0..h {
                for u in 0..w {
                    let t = hash_words(&[spec.seed ^ OBJ_SALT, i as u64, u as u64, v as u64]);
                    sprite.extend_from_slice(&[
                        130 + (t % 126) as u8,
                        130 + ((t >> 8) % 126) as u8,
                        130 + ((t >> 16) % 126) as u8,
                    ]);
                }
            }
            objects.push(Trajectory { w, h, positions, sprite });
        }

        let end_ms = spec.start_ms + spec.frame_interval_ms * spec.frames.saturating_sub(1) as i64;
        let fixes = vec![
            GeoFix::new(-16.9000, 145.7700, spec.start_ms)?,
            GeoFix::new(-16.8990, 145.7712, end_ms.max(spec.start_ms + 1))?,
        ];
        let mut background = Vec::with_capacity(spec.width as usize * spec.height as usize * 3);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let v = hash_words(&[spec.seed ^ BG_SALT, x as u64, y as u64]);
                background.extend_from_slice(&[40 + (v % 80) as u8, 40 + ((v >> 8) % 80) as u8, 40 + ((v >> 16) % 80) as u8]);
            }
        }
        Ok(Self {
            spec,
            objects,
            fixes,
            background: background.into(),
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn len(&self) -> u64 {
        self.spec.frames
    }

    pub fn is_empty(&self) -> bool {
        self.spec.frames == 0
    }

    /// Ground-truth boxes for one frame, in object order.
    pub fn boxes(&self, frame_id: u64) -> Vec<BoundingBox> {
        self.objects
            .iter()
            .filter_map(|o| {
                let (x, y) = *o.positions.get(frame_id as usize)?;
                Some(BoundingBox::new(x as f64, y as f64, o.w as f64, o.h as f64))
            })
            .collect()
    }

    pub fn truth(&self) -> AnnotationTable {
        let mut t = AnnotationTable::new();
        for id in 0..self.spec.frames {
            t.insert(id, self.boxes(id));
        }
        t
    }

    pub fn render(&self, frame_id: u64) -> Frame {
        let (w, h) = (self.spec.width, self.spec.height);
        let seed = self.spec.seed;
        let mut px = self.background.to_vec();
        for o in &self.objects {
            let Some(&(ox, oy)) = o.positions.get(frame_id as usize) else {
                continue;
            };
            // Clip the sprite to the frame.
            let (x0, x1) = (ox.max(0), (ox + o.w as i32).min(w as i32));
            if x0 >= x1 {
                continue;
            }
            for v in 0..o.h {
                let y = oy + v as i32;
                if y < 0 || y >= h as i32 {
                    continue;
                }
                let src = (v as usize * o.w as usize + (x0 - ox) as usize) * 3;
                let dst = (y as usize * w as usize + x0 as usize) * 3;
                let len = (x1 - x0) as usize * 3;
                px[dst..dst + len].copy_from_slice(&o.sprite[src..src + len]);
            }
        }
        let ts = self.spec.start_ms + self.spec.frame_interval_ms * frame_id as i64;
        let geo = interpolate_geo(&self.fixes, ts).ok();
        Frame::new(frame_id, ts, w, h, px, format!("synthetic:{}#{}", seed, frame_id))
            .expect("buffer sized from dimensions")
            .with_geo(geo)
    }
}
