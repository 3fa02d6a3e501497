use serde::{Deserialize, Serialize};

use super::MotionSegment;

/// Aggregate agreement between predicted and ground-truth segments. Error
/// and IoU statistics are over matched pairs only; misses are counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    /// Mean |center(pred) - center(gt)|, frames.
    pub center_error: f64,
    /// Population variance of the per-pair center error, frames².
    pub center_variance: f64,
    /// Mean |len(pred) - len(gt)|, frames.
    pub frame_count_error: f64,
    pub iou: f64,
    pub matched: usize,
    /// Ground-truth segments without a prediction.
    pub missed: usize,
    /// Predictions without a ground-truth segment.
    pub spurious: usize,
}

/// Intersection over union of inclusive frame ranges.
pub fn interval_iou(a: &MotionSegment, b: &MotionSegment) -> f64 {
    let inter = overlap(a, b);
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

fn overlap(a: &MotionSegment, b: &MotionSegment) -> usize {
    let lo = a.start_frame.max(b.start_frame);
    let hi = a.end_frame.min(b.end_frame);
    if hi >= lo {
        hi - lo + 1
    } else {
        0
    }
}

/// Greedy one-to-one matching by largest overlap (ties: lower gt index, then
/// lower pred index), then per-pair errors.
pub fn match_segments(pred: &[MotionSegment], gt: &[MotionSegment]) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize, usize)> = gt
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| pred.iter().enumerate().map(move |(pi, p)| (overlap(p, g), gi, pi)))
        .filter(|&(o, _, _)| o > 0)
        .collect();
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut out = Vec::new();
    for (_, gi, pi) in pairs {
        if !used_p[pi] && !used_g[gi] {
            used_p[pi] = true;
            used_g[gi] = true;
            out.push((pi, gi));
        }
    }
    out.sort_by_key(|&(_, gi)| gi);
    out
}

pub fn eval_segments(pred: &[MotionSegment], gt: &[MotionSegment]) -> SegMetrics {
    let matches = match_segments(pred, gt);
    let n = matches.len();
    let mut m = SegMetrics {
        center_error: 0.0,
        center_variance: 0.0,
        frame_count_error: 0.0,
        iou: 0.0,
        matched: n,
        missed: gt.len() - n,
        spurious: pred.len() - n,
    };
    if n == 0 {
        return m;
    }
    let centers: Vec<f64> = matches.iter().map(|&(p, g)| (pred[p].center() - gt[g].center()).abs()).collect();
    m.center_error = centers.iter().sum::<f64>() / n as f64;
    m.center_variance = centers.iter().map(|c| (c - m.center_error).powi(2)).sum::<f64>() / n as f64;
    m.frame_count_error = matches
        .iter()
        .map(|&(p, g)| pred[p].len().abs_diff(gt[g].len()) as f64)
        .sum::<f64>()
        / n as f64;
    m.iou = matches.iter().map(|&(p, g)| interval_iou(&pred[p], &gt[g])).sum::<f64>() / n as f64;
    m
}
