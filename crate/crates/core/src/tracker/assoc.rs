use crate::detector::Detection;
use crate::geometry::{iou, BoundingBox};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Association {
    /// `(detection index, track index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_tracks: Vec<usize>,
}

/// Greedy IoU matching of one frame's detections against tracks.
///
/// `tracks` holds `(track_id, current box)`. Candidate pairs need a positive
/// IoU of at least `iou_tau`; they are taken in descending IoU order, ties
/// broken by lower track id and then lower detection index.
pub fn associate(dets: &[Detection], tracks: &[(u64, BoundingBox)], iou_tau: f64) -> Association {
    let mut pairs: Vec<(f64, u64, usize, usize)> = Vec::new();
    for (di, d) in dets.iter().enumerate() {
        for (ti, (tid, tb)) in tracks.iter().enumerate() {
            let v = iou(&d.bbox, tb);
            if v > 0.0 && v >= iou_tau {
                pairs.push((v, *tid, di, ti));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut det_used = vec![false; dets.len()];
    let mut track_used = vec![false; tracks.len()];
    let mut matches = Vec::new();
    for (_, _, di, ti) in pairs {
        if !det_used[di] && !track_used[ti] {
            det_used[di] = true;
            track_used[ti] = true;
            matches.push((di, ti));
        }
    }
    Association {
        matches,
        unmatched_detections: (0..dets.len()).filter(|&i| !det_used[i]).collect(),
        unmatched_tracks: (0..tracks.len()).filter(|&i| !track_used[i]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(x: f64, y: f64, w: f64, h: f64) -> Detection {
        Detection::new(0, BoundingBox::new(x, y, w, h), 0.9)
    }

    /// Best total IoU over all one-to-one assignments respecting tau.
    fn brute_force(dets: &[Detection], tracks: &[(u64, BoundingBox)], tau: f64) -> (f64, Vec<Option<usize>>) {
        fn go(
            i: usize,
            dets: &[Detection],
            tracks: &[(u64, BoundingBox)],
            tau: f64,
            used: &mut Vec<bool>,
            cur: &mut Vec<Option<usize>>,
            best: &mut (f64, Vec<Option<usize>>, usize),
        ) {
            if i == dets.len() {
                let n = cur.iter().filter(|c| c.is_some()).count();
                let s: f64 = cur
                    .iter()
                    .enumerate()
                    .filter_map(|(d, t)| t.map(|t| iou(&dets[d].bbox, &tracks[t].1)))
                    .sum();
                if (n, s) > (best.2, best.0) {
                    *best = (s, cur.clone(), n);
                }
                return;
            }
            cur.push(None);
            go(i + 1, dets, tracks, tau, used, cur, best);
            cur.pop();
            for t in 0..tracks.len() {
                let v = iou(&dets[i].bbox, &tracks[t].1);
                if !used[t] && v > 0.0 && v >= tau {
                    used[t] = true;
                    cur.push(Some(t));
                    go(i + 1, dets, tracks, tau, used, cur, best);
                    cur.pop();
                    used[t] = false;
                }
            }
        }
        let mut best = (0.0, vec![None; dets.len()], 0);
        go(0, dets, tracks, tau, &mut vec![false; tracks.len()], &mut Vec::new(), &mut best);
        (best.0, best.1)
    }

    #[test]
    fn single_overlap_matches() {
        // IoU 0.6: 10x10 boxes shifted by 2.5 px -> 75 / 125.
        let a = associate(&[det(2.5, 0.0, 10.0, 10.0)], &[(0, BoundingBox::new(0.0, 0.0, 10.0, 10.0))], 0.3);
        assert_eq!(a.matches, vec![(0, 0)]);
    }

    #[test]
    fn disjoint_detection_left_unmatched() {
        let a = associate(&[det(50.0, 50.0, 10.0, 10.0)], &[(0, BoundingBox::new(0.0, 0.0, 10.0, 10.0))], 0.0);
        assert!(a.matches.is_empty());
        assert_eq!(a.unmatched_detections, vec![0]);
        assert_eq!(a.unmatched_tracks, vec![0]);
    }

    #[test]
    fn higher_iou_wins_and_agrees_with_brute_force() {
        let track = [(0, BoundingBox::new(0.0, 0.0, 10.0, 10.0))];
        // IoUs 0.8 (shift 10/9) and 0.5 (shift 10/3).
        let dets = [det(10.0 / 3.0, 0.0, 10.0, 10.0), det(10.0 / 9.0, 0.0, 10.0, 10.0)];
        assert!((iou(&dets[0].bbox, &track[0].1) - 0.5).abs() < 1e-9);
        assert!((iou(&dets[1].bbox, &track[0].1) - 0.8).abs() < 1e-9);
        let a = associate(&dets, &track, 0.3);
        assert_eq!(a.matches, vec![(1, 0)]);
        assert_eq!(a.unmatched_detections, vec![0]);
        let (_, best) = brute_force(&dets, &track, 0.3);
        assert_eq!(best, vec![None, Some(0)]);
    }

    #[test]
    fn ties_go_to_lower_track_id() {
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let a = associate(&[det(0.0, 0.0, 10.0, 10.0)], &[(7, b), (3, b)], 0.3);
        assert_eq!(a.matches, vec![(0, 1)]);
    }

    fn boxes(max: usize) -> impl Strategy<Value = Vec<(f64, f64, f64, f64)>> {
        proptest::collection::vec((0.0f64..60.0, 0.0f64..60.0, 4.0f64..25.0, 4.0f64..25.0), 0..max)
    }

    proptest! {
        #[test]
        fn matches_respect_threshold_and_are_one_to_one(d in boxes(8), t in boxes(8), tau in 0.0f64..0.9) {
            let dets: Vec<Detection> = d.iter().map(|&(x, y, w, h)| det(x, y, w, h)).collect();
            let tracks: Vec<(u64, BoundingBox)> =
                t.iter().enumerate().map(|(i, &(x, y, w, h))| (i as u64, BoundingBox::new(x, y, w, h))).collect();
            let a = associate(&dets, &tracks, tau);
            let mut seen_d = std::collections::HashSet::new();
            let mut seen_t = std::collections::HashSet::new();
            for &(di, ti) in &a.matches {
                prop_assert!(iou(&dets[di].bbox, &tracks[ti].1) >= tau);
                prop_assert!(seen_d.insert(di));
                prop_assert!(seen_t.insert(ti));
            }
            prop_assert_eq!(a.matches.len() + a.unmatched_detections.len(), dets.len());
            prop_assert_eq!(a.matches.len() + a.unmatched_tracks.len(), tracks.len());
        }
    }
}
