//! Frame ingestion: survey frame sources, geotagging, resizing to the model
//! input size, and persisted frame records.

mod annotations;
mod record;
mod source;
mod synthetic;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;

pub use annotations::AnnotationTable;
pub use record::{frame_file_name, FrameRecordWriter, MetadataRecord, WrittenPaths};
pub use source::{open_source, DirectorySpec, FrameSource, SourceSpec};
pub use synthetic::{SyntheticScene, SyntheticSpec};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("frame source not found: {0}")]
    MissingSource(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad metadata in {path} line {line}: {message}")]
    Metadata {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("bad annotations: {0}")]
    Annotations(String),
    #[error("no geolocation available")]
    NoGeolocation,
    #[error("invalid geolocation lat={lat} lon={lon}")]
    InvalidGeo { lat: f64, lon: f64 },
    #[error("pixel buffer length {actual} does not match {width}x{height}x3")]
    PixelLength { width: u32, height: u32, actual: usize },
    #[error("invalid source descriptor: {0}")]
    Descriptor(String),
    #[error("storage error on {path}: {message}")]
    Storage { path: PathBuf, message: String },
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

/// A GPS fix. Latitude and longitude in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoFix {
    pub lat: f64,
    pub lon: f64,
    pub fix_time_ms: i64,
}

impl GeoFix {
    pub fn new(lat: f64, lon: f64, fix_time_ms: i64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(IngestError::InvalidGeo { lat, lon });
        }
        Ok(Self { lat, lon, fix_time_ms })
    }
}

/// One decoded survey frame.
///
/// `scale_x`/`scale_y` record the factor between this frame's pixel grid and
/// the original capture, so boxes found on a resized frame can be mapped back
/// with [`Frame::to_source`].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    pub timestamp_ms: i64,
    pub width: u32,
    pub height: u32,
    pub pixels: Arc<[u8]>,
    pub geo: Option<GeoFix>,
    pub source_ref: String,
    pub scale_x: f64,
    pub scale_y: f64,
}

impl Frame {
    pub fn new(
        frame_id: u64,
        timestamp_ms: i64,
        width: u32,
        height: u32,
        pixels: Vec<u8>,
        source_ref: impl Into<String>,
    ) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width as usize * height as usize * 3 {
            return Err(IngestError::PixelLength {
                width,
                height,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            frame_id,
            timestamp_ms,
            width,
            height,
            pixels: pixels.into(),
            geo: None,
            source_ref: source_ref.into(),
            scale_x: 1.0,
            scale_y: 1.0,
        })
    }

    pub fn with_geo(mut self, geo: Option<GeoFix>) -> Self {
        self.geo = geo;
        self
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn pixel_count(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    /// Map a box on this frame's grid back to original capture coordinates.
    pub fn to_source(&self, b: &BoundingBox) -> BoundingBox {
        b.scaled(1.0 / self.scale_x, 1.0 / self.scale_y)
    }

    /// Map a box in original capture coordinates onto this frame's grid.
    pub fn from_source(&self, b: &BoundingBox) -> BoundingBox {
        b.scaled(self.scale_x, self.scale_y)
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width, self.height, self.pixels.to_vec())
            .expect("pixel length checked at construction")
    }
}

/// Linear interpolation between the fixes bracketing `t`, clamped to the
/// first/last fix outside the covered time range.
pub fn interpolate_geo(fixes: &[GeoFix], t: i64) -> Result<GeoFix> {
    let first = fixes.first().ok_or(IngestError::NoGeolocation)?;
    let last = fixes.last().ok_or(IngestError::NoGeolocation)?;
    if t <= first.fix_time_ms {
        return Ok(GeoFix { fix_time_ms: t, ..*first });
    }
    if t >= last.fix_time_ms {
        return Ok(GeoFix { fix_time_ms: t, ..*last });
    }
    // First fix strictly after t; its predecessor is at or before t.
    let hi = fixes.partition_point(|f| f.fix_time_ms <= t);
    let (a, b) = (&fixes[hi - 1], &fixes[hi]);
    if a.fix_time_ms == t {
        return Ok(*a);
    }
    let span = (b.fix_time_ms - a.fix_time_ms) as f64;
    let u = (t - a.fix_time_ms) as f64 / span;
    Ok(GeoFix {
        lat: a.lat + (b.lat - a.lat) * u,
        lon: a.lon + (b.lon - a.lon) * u,
        fix_time_ms: t,
    })
}

/// Output dimensions for scaling the longest edge to `target_edge`, rounding
/// the other edge half-up.
pub fn resized_dims(width: u32, height: u32, target_edge: u32) -> (u32, u32) {
    let scale_other = |other: u32, longest: u32| -> u32 {
        let (o, t, l) = (other as u64, target_edge as u64, longest as u64);
        (((2 * o * t + l) / (2 * l)) as u32).max(1)
    };
    if width >= height {
        (target_edge, scale_other(height, width))
    } else {
        (scale_other(width, height), target_edge)
    }
}

/// Scale the frame so its longest edge equals `target_edge` (bilinear).
pub fn resize_frame(f: &Frame, target_edge: u32) -> Result<Frame> {
    if target_edge == 0 {
        return Err(IngestError::Descriptor("target edge must be positive".into()));
    }
    let (nw, nh) = resized_dims(f.width, f.height, target_edge);
    if nw == f.width && nh == f.height {
        return Ok(f.clone());
    }
    let pixels = bilinear(&f.pixels, f.width, f.height, nw, nh);
    Ok(Frame {
        width: nw,
        height: nh,
        pixels: pixels.into(),
        scale_x: f.scale_x * nw as f64 / f.width as f64,
        scale_y: f.scale_y * nh as f64 / f.height as f64,
        ..f.clone()
    })
}

fn bilinear(src: &[u8], sw: u32, sh: u32, dw: u32, dh: u32) -> Vec<u8> {
    let (sw_us, sh_us) = (sw as usize, sh as usize);
    let fx = sw as f64 / dw as f64;
    let fy = sh as f64 / dh as f64;
    // Pixel-centre alignment; sample positions clamped to the source grid.
    let taps = |d: u32, f: f64, s: usize| -> Vec<(usize, usize, f32)> {
        (0..d)
            .map(|i| {
                let p = ((i as f64 + 0.5) * f - 0.5).clamp(0.0, (s - 1) as f64);
                let i0 = p.floor() as usize;
                let i1 = (i0 + 1).min(s - 1);
                (i0, i1, (p - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(dw, fx, sw_us);
    let ys = taps(dh, fy, sh_us);
    let mut out = vec![0u8; dw as usize * dh as usize * 3];
    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
        let row0 = &src[y0 * sw_us * 3..(y0 + 1) * sw_us * 3];
        let row1 = &src[y1 * sw_us * 3..(y1 + 1) * sw_us * 3];
        let dst = &mut out[oy * dw as usize * 3..(oy + 1) * dw as usize * 3];
        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let p00 = row0[x0 * 3 + c] as f32;
                let p01 = row0[x1 * 3 + c] as f32;
                let p10 = row1[x0 * 3 + c] as f32;
                let p11 = row1[x1 * 3 + c] as f32;
                let top = p00 + (p01 - p00) * wx;
                let bot = p10 + (p11 - p10) * wx;
                dst[ox * 3 + c] = (top + (bot - top) * wy).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fix(t: i64, lat: f64, lon: f64) -> GeoFix {
        GeoFix::new(lat, lon, t).unwrap()
    }

    #[test]
    fn interpolate_hits_and_midpoints() {
        let fixes = [fix(0, 0.0, 10.0), fix(1000, 2.0, 12.0)];
        assert_eq!(interpolate_geo(&fixes, 0).unwrap(), fixes[0]);
        assert_eq!(interpolate_geo(&fixes, 1000).unwrap(), fixes[1]);
        let mid = interpolate_geo(&fixes, 500).unwrap();
        assert_eq!(mid.lat, 1.0);
        assert_eq!(mid.lon, 11.0);
    }

    #[test]
    fn interpolate_clamps_outside_range() {
        let fixes = [fix(100, -16.5, 145.0), fix(200, -16.4, 145.1)];
        let before = interpolate_geo(&fixes, 0).unwrap();
        assert_eq!((before.lat, before.lon), (-16.5, 145.0));
        let after = interpolate_geo(&fixes, 10_000).unwrap();
        assert_eq!((after.lat, after.lon), (-16.4, 145.1));
    }

    #[test]
    fn interpolate_empty_is_error() {
        let err = interpolate_geo(&[], 5).unwrap_err();
        assert_eq!(err.to_string(), "no geolocation available");
    }

    #[test]
    fn geofix_range_checked() {
        assert!(GeoFix::new(91.0, 0.0, 0).is_err());
        assert!(GeoFix::new(0.0, -181.0, 0).is_err());
        assert!(GeoFix::new(-90.0, 180.0, 0).is_ok());
    }

    #[test]
    fn resized_dimensions_round_half_up() {
        // 1080 * 1080 / 1920 = 607.5
        assert_eq!(resized_dims(1920, 1080, 1080), (1080, 608));
        // 1080 * 720 / 1920 = 405 exactly
        assert_eq!(resized_dims(1920, 1080, 720), (720, 405));
        assert_eq!(resized_dims(1080, 1920, 720), (405, 720));
        assert_eq!(resized_dims(3, 1, 4), (4, 1));
    }

    #[test]
    fn resize_identity_is_pixel_identical() {
        let px: Vec<u8> = (0..(16 * 9 * 3)).map(|i| (i * 7 % 251) as u8).collect();
        let f = Frame::new(0, 0, 16, 9, px, "mem").unwrap();
        let g = resize_frame(&f, 16).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn resize_keeps_identity_fields() {
        let f = Frame::new(12, 3400, 40, 20, vec![100; 40 * 20 * 3], "mem")
            .unwrap()
            .with_geo(Some(fix(3400, -16.0, 145.0)));
        let g = resize_frame(&f, 10).unwrap();
        assert_eq!((g.width, g.height), (10, 5));
        assert_eq!((g.frame_id, g.timestamp_ms, g.geo), (12, 3400, f.geo));
        assert_eq!(g.pixels.len(), 10 * 5 * 3);
        assert!(g.pixels.iter().all(|&p| p == 100));
        assert_eq!((g.scale_x, g.scale_y), (0.25, 0.25));
    }

    #[test]
    fn frame_rejects_bad_pixel_length() {
        assert!(Frame::new(0, 0, 4, 4, vec![0; 47], "mem").is_err());
    }

    proptest! {
        #[test]
        fn interpolation_monotone_in_time(
            mut lats in proptest::collection::vec(-80.0f64..80.0, 2..6),
            t1 in -500i64..6000, t2 in -500i64..6000,
        ) {
            lats.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let fixes: Vec<GeoFix> = lats
                .iter()
                .enumerate()
                .map(|(i, &lat)| fix(i as i64 * 1000, lat, 0.0))
                .collect();
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let a = interpolate_geo(&fixes, lo).unwrap();
            let b = interpolate_geo(&fixes, hi).unwrap();
            prop_assert!(a.lat <= b.lat + 1e-12);
        }

        #[test]
        fn resize_box_round_trip_within_one_pixel(
            w in 8u32..400, h in 8u32..400, target in 4u32..500,
            bx in 0.0f64..1.0, by in 0.0f64..1.0, bw in 0.05f64..0.5, bh in 0.05f64..0.5,
        ) {
            let f = Frame::new(0, 0, w, h, vec![0; (w * h * 3) as usize], "mem").unwrap();
            let g = resize_frame(&f, target).unwrap();
            let orig = BoundingBox::new(bx * w as f64, by * h as f64, bw * w as f64, bh * h as f64);
            let back = g.to_source(&g.from_source(&orig));
            prop_assert!((back.x - orig.x).abs() <= 1.0);
            prop_assert!((back.y - orig.y).abs() <= 1.0);
            prop_assert!((back.w - orig.w).abs() <= 1.0);
            prop_assert!((back.h - orig.h).abs() <= 1.0);
            // Nearest integer box on the resized grid also maps back within
            // one resized pixel, i.e. 1/scale source pixels.
            let r = g.from_source(&orig);
            let rounded = BoundingBox::new(r.x.round(), r.y.round(), r.w.round(), r.h.round());
            let back = g.to_source(&rounded);
            prop_assert!((back.x - orig.x).abs() <= 0.5 / g.scale_x + 1e-9);
            prop_assert!((back.y - orig.y).abs() <= 0.5 / g.scale_y + 1e-9);
        }
    }
}
