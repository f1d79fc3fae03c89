//! Per-region block matching: exhaustive integer SAD search.

use super::TrackerError;
use crate::geometry::BoundingBox;
use crate::ingest::Frame;

/// Displacement of a region from the previous to the current frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowVector {
    pub dx: i32,
    pub dy: i32,
    /// `1 - best_sad / worst_sad`, in `[0, 1]`.
    pub score: f64,
}

/// Patches wider or taller than this are sampled on a coarser grid.
const MAX_SAMPLED_EDGE: u32 = 64;

/// Integer pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy)]
struct Patch {
    x0: i32,
    y0: i32,
    x1: i32,
    y1: i32,
    stride: usize,
}

fn patch_of(region: &BoundingBox, width: u32, height: u32) -> Option<Patch> {
    if !region.is_valid() {
        return None;
    }
    let x0 = (region.x.floor() as i64).max(0);
    let y0 = (region.y.floor() as i64).max(0);
    let x1 = (region.right().ceil() as i64).min(width as i64);
    let y1 = (region.bottom().ceil() as i64).min(height as i64);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    let edge = (x1 - x0).max(y1 - y0) as u32;
    Some(Patch {
        x0: x0 as i32,
        y0: y0 as i32,
        x1: x1 as i32,
        y1: y1 as i32,
        stride: edge.div_ceil(MAX_SAMPLED_EDGE).max(1) as usize,
    })
}

/// Find the integer shift in `[-radius, radius]^2` that best maps `region`
/// of `prev` onto `cur`, by minimum sum of absolute RGB differences.
///
/// Ties go to the smallest `|dx| + |dy|`, then the smallest `dy`, then the
/// smallest `dx`. A flat patch has no defined motion and yields `(0, 0)` with
/// score 0. Regions partly outside the frame are clipped first.
pub fn estimate_flow(prev: &Frame, cur: &Frame, region: &BoundingBox, radius: u32) -> Result<FlowVector, TrackerError> {
    if prev.width != cur.width || prev.height != cur.height {
        return Err(TrackerError::FrameSizeMismatch {
            prev: (prev.width, prev.height),
            cur: (cur.width, cur.height),
        });
    }
    let p = patch_of(region, prev.width, prev.height).ok_or(TrackerError::RegionOutsideFrame(*region))?;
    let (w, h) = (prev.width as i32, prev.height as i32);
    let row_bytes = prev.width as usize * 3;
    let xs: Vec<usize> = (p.x0..p.x1).step_by(p.stride).map(|x| x as usize * 3).collect();
    let ys: Vec<usize> = (p.y0..p.y1).step_by(p.stride).map(|y| y as usize).collect();

    let src = &prev.pixels;
    let first = &src[ys[0] * row_bytes + xs[0]..ys[0] * row_bytes + xs[0] + 3];
    let flat = ys.iter().all(|&y| {
        xs.iter()
            .all(|&x| &src[y * row_bytes + x..y * row_bytes + x + 3] == first)
    });
    if flat {
        return Ok(FlowVector { dx: 0, dy: 0, score: 0.0 });
    }

    let r = radius as i32;
    let mut candidates: Vec<(i32, i32)> = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            if p.x0 + dx >= 0 && p.x1 + dx <= w && p.y0 + dy >= 0 && p.y1 + dy <= h {
                candidates.push((dx, dy));
            }
        }
    }
    candidates.sort_by_key(|&(dx, dy)| (dx.abs() + dy.abs(), dy, dx));

    let dst = &cur.pixels;
    let mut best = (0, 0);
    let mut best_sad = u64::MAX;
    for &(dx, dy) in &candidates {
        let mut sad = 0u64;
        'rows: for &y in &ys {
            let s_row = &src[y * row_bytes..(y + 1) * row_bytes];
            let cy = (y as i32 + dy) as usize;
            let d_row = &dst[cy * row_bytes..(cy + 1) * row_bytes];
            let shift = dx as isize * 3;
            for &x in &xs {
                let cx = (x as isize + shift) as usize;
                sad += s_row[x].abs_diff(d_row[cx]) as u64
                    + s_row[x + 1].abs_diff(d_row[cx + 1]) as u64
                    + s_row[x + 2].abs_diff(d_row[cx + 2]) as u64;
            }
            if sad >= best_sad {
                break 'rows;
            }
        }
        if sad < best_sad {
            best_sad = sad;
            best = (dx, dy);
            if sad == 0 {
                break;
            }
        }
    }
    let worst = 255u64 * 3 * (xs.len() * ys.len()) as u64;
    Ok(FlowVector {
        dx: best.0,
        dy: best.1,
        score: 1.0 - best_sad as f64 / worst as f64,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::hash_words;

    pub(crate) fn textured(id: u64, w: u32, h: u32, seed: u64) -> Frame {
        let mut px = vec![0u8; (w * h * 3) as usize];
        for y in 0..h {
            for x in 0..w {
                let v = hash_words(&[seed, x as u64, y as u64]);
                let i = ((y * w + x) * 3) as usize;
                px[i] = v as u8;
                px[i + 1] = (v >> 8) as u8;
                px[i + 2] = (v >> 16) as u8;
            }
        }
        Frame::new(id, 0, w, h, px, "mem").unwrap()
    }

    /// `cur(x, y) = prev(x - dx, y - dy)`, exposed border filled with 0.
    pub(crate) fn shifted(prev: &Frame, dx: i32, dy: i32) -> Frame {
        let (w, h) = (prev.width as i32, prev.height as i32);
        let mut px = vec![0u8; prev.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x - dx, y - dy);
                if sx < 0 || sy < 0 || sx >= w || sy >= h {
                    continue;
                }
                let s = ((sy * w + sx) * 3) as usize;
                let d = ((y * w + x) * 3) as usize;
                px[d..d + 3].copy_from_slice(&prev.pixels[s..s + 3]);
            }
        }
        Frame::new(prev.frame_id + 1, 0, prev.width, prev.height, px, "mem").unwrap()
    }

    #[test]
    fn identity_has_zero_motion_full_score() {
        let f = textured(0, 80, 60, 1);
        let v = estimate_flow(&f, &f, &BoundingBox::new(20.0, 20.0, 16.0, 16.0), 8).unwrap();
        assert_eq!(v, FlowVector { dx: 0, dy: 0, score: 1.0 });
    }

    #[test]
    fn recovers_known_shift() {
        let prev = textured(0, 100, 80, 2);
        let cur = shifted(&prev, 3, -2);
        let v = estimate_flow(&prev, &cur, &BoundingBox::new(40.0, 30.0, 20.0, 20.0), 5).unwrap();
        assert_eq!((v.dx, v.dy), (3, -2));
        assert_eq!(v.score, 1.0);
    }

    #[test]
    fn flat_patch_is_degenerate() {
        let gray = Frame::new(0, 0, 30, 30, vec![128; 30 * 30 * 3], "mem").unwrap();
        let v = estimate_flow(&gray, &gray, &BoundingBox::new(5.0, 5.0, 10.0, 10.0), 4).unwrap();
        assert_eq!(v, FlowVector { dx: 0, dy: 0, score: 0.0 });
    }

    #[test]
    fn region_outside_frame_rejected() {
        let f = textured(0, 30, 30, 3);
        let err = estimate_flow(&f, &f, &BoundingBox::new(40.0, 40.0, 5.0, 5.0), 4).unwrap_err();
        assert!(matches!(err, TrackerError::RegionOutsideFrame(_)));
        let small = textured(1, 20, 20, 3);
        assert!(matches!(
            estimate_flow(&f, &small, &BoundingBox::new(1.0, 1.0, 5.0, 5.0), 2),
            Err(TrackerError::FrameSizeMismatch { .. })
        ));
    }

    #[test]
    fn ties_prefer_smallest_displacement() {
        // Horizontal stripes: any dx matches equally, so dx must be 0.
        let (w, h) = (40u32, 40u32);
        let mut px = vec![0u8; (w * h * 3) as usize];
        for y in 0..h {
            for x in 0..w {
                let i = ((y * w + x) * 3) as usize;
                let v = (hash_words(&[9, y as u64]) & 0xff) as u8;
                px[i..i + 3].copy_from_slice(&[v, v, v]);
            }
        }
        let prev = Frame::new(0, 0, w, h, px, "mem").unwrap();
        let cur = shifted(&prev, 0, 2);
        let v = estimate_flow(&prev, &cur, &BoundingBox::new(15.0, 15.0, 8.0, 8.0), 4).unwrap();
        assert_eq!((v.dx, v.dy), (0, 2));
    }

    #[test]
    fn large_patches_are_subsampled_but_exact() {
        let prev = textured(0, 400, 300, 4);
        let cur = shifted(&prev, -7, 5);
        let v = estimate_flow(&prev, &cur, &BoundingBox::new(100.0, 80.0, 180.0, 150.0), 10).unwrap();
        assert_eq!((v.dx, v.dy), (-7, 5));
    }
}
