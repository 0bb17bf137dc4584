//! Random matching instances and an exhaustive matching oracle.

use handstream::infer::DetectionEvent;
use handstream::metrics::MatchResult;
use handstream::pose_io::{Category, GestureAnnotation};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const SEQ_LEN: usize = 300;

pub fn gesture(label: usize, start: usize, end: usize) -> GestureAnnotation {
    GestureAnnotation::new(label, start, end, Category::Static)
}

pub fn detection(label: usize, start: usize, end: usize) -> DetectionEvent {
    DetectionEvent {
        label,
        pred_start_frame: start,
        pred_end_frame: end,
        first_emit_frame: end.min(start + 8),
    }
}

/// Up to 6 sorted, disjoint gestures and up to 8 detections that may overlap
/// each other; most detections are jittered copies of a gesture.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<GestureAnnotation>, Vec<DetectionEvent>) {
    let n_gt = rng.random_range(1..=6);
    let mut cuts: Vec<usize> = Vec::new();
    while cuts.len() < 2 {
        cuts = (0..2 * n_gt).map(|_| rng.random_range(0..SEQ_LEN)).collect();
        cuts.sort_unstable();
        cuts.dedup();
    }
    // sorted distinct cut points paired up give disjoint sorted spans
    let gt: Vec<GestureAnnotation> = cuts
        .chunks_exact(2)
        .map(|c| gesture(rng.random_range(1..=3), c[0], c[1]))
        .collect();
    let n_det = rng.random_range(0..=8);
    let det = (0..n_det)
        .map(|_| {
            if !gt.is_empty() && rng.random_bool(0.75) {
                let g = gt[rng.random_range(0..gt.len())];
                let len = g.len() as i64;
                let shift = rng.random_range(-len..=len);
                let grow = rng.random_range(-len / 2..=len);
                let s = (g.start_frame as i64 + shift).clamp(0, SEQ_LEN as i64 - 1);
                let e = (g.end_frame as i64 + shift + grow).clamp(s, SEQ_LEN as i64 - 1);
                let label = if rng.random_bool(0.85) { g.label } else { rng.random_range(1..=3) };
                detection(label, s as usize, e as usize)
            } else {
                let s = rng.random_range(0..SEQ_LEN);
                let e = rng.random_range(s..SEQ_LEN.min(s + 80));
                detection(rng.random_range(1..=3), s, e)
            }
        })
        .collect();
    (gt, det)
}

/// The matching rule written out directly from its definition.
pub fn oracle_qualifies(g: &GestureAnnotation, d: &DetectionEvent, mor: f64) -> bool {
    let lo = g.start_frame.max(d.pred_start_frame);
    let hi = g.end_frame.min(d.pred_end_frame);
    let inter = if lo <= hi { hi - lo + 1 } else { 0 };
    let g_len = g.end_frame - g.start_frame + 1;
    let d_len = d.pred_end_frame - d.pred_start_frame + 1;
    d.label == g.label && inter > 0 && inter as f64 >= mor * g_len as f64 - 1e-9 && d_len <= 2 * g_len
}

/// Maximum one-to-one matching size by exhaustive search.
pub fn optimal_count(gt: &[GestureAnnotation], det: &[DetectionEvent], mor: f64) -> usize {
    fn go(i: usize, gt: &[GestureAnnotation], det: &[DetectionEvent], mor: f64, used: &mut [bool]) -> usize {
        if i == gt.len() {
            return 0;
        }
        let mut best = go(i + 1, gt, det, mor, used);
        for d in 0..det.len() {
            if !used[d] && oracle_qualifies(&gt[i], &det[d], mor) {
                used[d] = true;
                best = best.max(1 + go(i + 1, gt, det, mor, used));
                used[d] = false;
            }
        }
        best
    }
    go(0, gt, det, mor, &mut vec![false; det.len()])
}

pub fn assert_valid_matching(gt: &[GestureAnnotation], det: &[DetectionEvent], m: &MatchResult, mor: f64) {
    let mut seen = vec![false; det.len()];
    for (gi, dm) in m.gt_match.iter().enumerate() {
        if let Some(di) = *dm {
            assert!(!seen[di], "detection {di} used twice");
            seen[di] = true;
            assert!(oracle_qualifies(&gt[gi], &det[di], mor));
        }
    }
    assert_eq!(seen, m.det_matched);
}

pub const SWEEP: [f64; 20] = [
    0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0,
];
