//! Statistical motion segmentation over per-frame event counts.
//!
//! Pipeline: polarity ratio and windowed count variance per frame, both
//! smoothed, thresholded into static/motion labels, runs of motion frames
//! extracted as candidates and finally refined by length and gap rules.

mod features;
mod metrics;

pub use features::{compute_efv, compute_pner, lower_median, smooth};
pub use metrics::{eval_segments, interval_iou, SegMetrics};

use serde::{Deserialize, Serialize};

use crate::codec::Symbol;
use crate::error::{Error, Result};
use crate::event::FrameSeries;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub variance_window: usize,
    pub smoothing_window: usize,
    pub theta_r: f64,
    /// Variance threshold as a fraction of the median smoothed variance.
    pub theta_v_fraction: f64,
    /// Candidate runs shorter than this are ignored.
    pub min_segment: usize,
    pub min_action: usize,
    pub merge_gap: usize,
    pub min_valid: usize,
    /// Ratio assigned to frames without events.
    pub empty_frame_ratio: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            variance_window: 10,
            smoothing_window: 5,
            theta_r: 0.5,
            theta_v_fraction: 0.5,
            min_segment: 10,
            min_action: 30,
            merge_gap: 10,
            min_valid: 91,
            empty_frame_ratio: 0.0,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        let windows = [
            ("variance_window", self.variance_window),
            ("smoothing_window", self.smoothing_window),
            ("min_segment", self.min_segment),
            ("min_action", self.min_action),
            ("merge_gap", self.merge_gap),
            ("min_valid", self.min_valid),
        ];
        if let Some((name, _)) = windows.iter().find(|(_, v)| *v < 1) {
            return Err(Error::invalid(format!("{name} must be >= 1")));
        }
        if !(self.theta_r > 0.0 && self.theta_r < 1.0) {
            return Err(Error::invalid("theta_r must lie in (0, 1)"));
        }
        if !(self.theta_v_fraction > 0.0) {
            return Err(Error::invalid("theta_v_fraction must be positive"));
        }
        if !(0.0..=1.0).contains(&self.empty_frame_ratio) {
            return Err(Error::invalid("empty_frame_ratio must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Inclusive frame interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MotionSegment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub label: Option<Symbol>,
}

impl MotionSegment {
    pub fn new(start_frame: usize, end_frame: usize, label: Option<Symbol>) -> Self {
        debug_assert!(start_frame <= end_frame);
        MotionSegment {
            start_frame,
            end_frame,
            label,
        }
    }

    pub fn unlabeled(start_frame: usize, end_frame: usize) -> Self {
        Self::new(start_frame, end_frame, None)
    }

    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn center(&self) -> f64 {
        (self.start_frame + self.end_frame) as f64 / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSeries {
    pub r: Vec<f64>,
    pub v: Vec<f64>,
    pub r_smooth: Vec<f64>,
    pub v_smooth: Vec<f64>,
    pub theta_v: f64,
    /// 1 = static, 0 = motion.
    pub g: Vec<u8>,
}

pub fn compute_features(frames: &FrameSeries, cfg: &SegConfig) -> FeatureSeries {
    let r = compute_pner(frames, cfg.empty_frame_ratio);
    let v = compute_efv(&frames.totals(), cfg.variance_window);
    let r_smooth = smooth(&r, cfg.smoothing_window);
    let v_smooth = smooth(&v, cfg.smoothing_window);
    let theta_v = cfg.theta_v_fraction * lower_median(&v_smooth);
    let g = label_with_threshold(&r_smooth, &v_smooth, cfg.theta_r, theta_v);
    FeatureSeries {
        r,
        v,
        r_smooth,
        v_smooth,
        theta_v,
        g,
    }
}

/// `G_n = 1` (static) iff `R_n < theta_r` and `V_n < theta_v`, with
/// `theta_v = theta_v_fraction * lower_median(V)`. A frame with exactly zero
/// variance counts as below the threshold even when the threshold itself
/// collapses to zero.
pub fn label_frames(r_smooth: &[f64], v_smooth: &[f64], cfg: &SegConfig) -> Vec<u8> {
    let theta_v = cfg.theta_v_fraction * lower_median(v_smooth);
    label_with_threshold(r_smooth, v_smooth, cfg.theta_r, theta_v)
}

fn label_with_threshold(r: &[f64], v: &[f64], theta_r: f64, theta_v: f64) -> Vec<u8> {
    assert_eq!(r.len(), v.len(), "feature series lengths differ");
    r.iter()
        .zip(v)
        .map(|(&r, &v)| u8::from(r < theta_r && (v < theta_v || v == 0.0)))
        .collect()
}

/// Label transitions and the motion runs of at least `min_segment` frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Boundaries {
    /// Indices `n` with `G[n+1] != G[n]`.
    pub points: Vec<usize>,
    pub candidates: Vec<MotionSegment>,
}

pub fn detect_boundaries(g: &[u8], min_segment: usize) -> Boundaries {
    let points = g.windows(2).enumerate().filter(|(_, w)| w[0] != w[1]).map(|(n, _)| n).collect();
    let mut candidates = Vec::new();
    let mut run_start = None;
    for (n, &label) in g.iter().chain(std::iter::once(&1)).enumerate() {
        match (label, run_start) {
            (0, None) => run_start = Some(n),
            (0, Some(_)) => {}
            (_, Some(s)) => {
                if n - s >= min_segment {
                    candidates.push(MotionSegment::unlabeled(s, n - 1));
                }
                run_start = None;
            }
            _ => {}
        }
    }
    Boundaries { points, candidates }
}

/// Drops short segments, merges close neighbours, then drops segments that
/// are still too short to be an action.
pub fn refine(candidates: &[MotionSegment], cfg: &SegConfig) -> Vec<MotionSegment> {
    let mut merged: Vec<MotionSegment> = Vec::new();
    for seg in candidates.iter().filter(|s| s.len() >= cfg.min_action) {
        match merged.last_mut() {
            Some(last) if seg.start_frame <= last.end_frame + cfg.merge_gap + 1 => {
                last.end_frame = last.end_frame.max(seg.end_frame);
            }
            _ => merged.push(MotionSegment::unlabeled(seg.start_frame, seg.end_frame)),
        }
    }
    merged.retain(|s| s.len() >= cfg.min_valid);
    merged
}

pub fn segment(frames: &FrameSeries, cfg: &SegConfig) -> Vec<MotionSegment> {
    segment_detailed(frames, cfg).1
}

pub fn segment_detailed(frames: &FrameSeries, cfg: &SegConfig) -> (FeatureSeries, Vec<MotionSegment>) {
    let features = compute_features(frames, cfg);
    let boundaries = detect_boundaries(&features.g, cfg.min_segment);
    let segments = refine(&boundaries.candidates, cfg);
    (features, segments)
}

pub fn segments_to_json(segments: &[MotionSegment]) -> Result<String> {
    Ok(serde_json::to_string_pretty(segments)?)
}

pub fn segments_from_json(text: &str) -> Result<Vec<MotionSegment>> {
    let segs: Vec<MotionSegment> = serde_json::from_str(text)?;
    if let Some(s) = segs.iter().find(|s| s.start_frame > s.end_frame) {
        return Err(Error::invalid(format!("segment start {} after end {}", s.start_frame, s.end_frame)));
    }
    Ok(segs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g_from(parts: &[(u8, usize)]) -> Vec<u8> {
        parts.iter().flat_map(|&(v, n)| std::iter::repeat(v).take(n)).collect()
    }

    #[test]
    fn all_static_has_no_boundaries() {
        let b = detect_boundaries(&[1; 20], 10);
        assert!(b.points.is_empty());
        assert!(b.candidates.is_empty());
    }

    #[test]
    fn single_long_run() {
        let b = detect_boundaries(&g_from(&[(1, 5), (0, 12), (1, 5)]), 10);
        assert_eq!(b.points, vec![4, 16]);
        assert_eq!(b.candidates, vec![MotionSegment::unlabeled(5, 16)]);
        assert_eq!(b.candidates[0].len(), 12);
    }

    #[test]
    fn short_run_filtered() {
        let b = detect_boundaries(&g_from(&[(1, 5), (0, 7), (1, 5)]), 10);
        assert!(b.candidates.is_empty());
    }

    #[test]
    fn runs_at_series_edges() {
        let b = detect_boundaries(&g_from(&[(0, 10), (1, 3), (0, 11)]), 10);
        assert_eq!(b.candidates, vec![MotionSegment::unlabeled(0, 9), MotionSegment::unlabeled(13, 23)]);
    }

    #[test]
    fn refine_examples() {
        let cfg = SegConfig {
            min_valid: 30,
            ..SegConfig::default()
        };
        // inclusive length 30 passes the min_action rule
        assert_eq!(refine(&[MotionSegment::unlabeled(0, 29)], &cfg).len(), 1);
        assert!(refine(&[MotionSegment::unlabeled(0, 28)], &cfg).is_empty());

        let cfg = SegConfig::default();
        let merged = refine(&[MotionSegment::unlabeled(0, 50), MotionSegment::unlabeled(58, 120)], &cfg);
        assert_eq!(merged, vec![MotionSegment::unlabeled(0, 120)]);
        assert!(refine(&[MotionSegment::unlabeled(0, 89)], &cfg).is_empty());
        assert_eq!(refine(&[MotionSegment::unlabeled(0, 90)], &cfg).len(), 1);
        // gap of 11 frames is not merged
        let apart = refine(&[MotionSegment::unlabeled(0, 100), MotionSegment::unlabeled(112, 220)], &cfg);
        assert_eq!(apart.len(), 2);
    }

    #[test]
    fn labels_follow_conjunction() {
        let cfg = SegConfig::default();
        assert_eq!(label_frames(&[0.0; 4], &[0.0; 4], &cfg), vec![1; 4]);
        // median 1.0 -> theta_v 0.5
        let g = label_frames(&[0.2, 0.9, 0.2, 0.2], &[1.0, 2.0, 10.0, 0.1], &cfg);
        assert_eq!(g, vec![0, 0, 0, 1]);
        let g = label_frames(&[0.9, 0.9, 0.9], &[0.0, 0.0, 0.0], &cfg);
        assert_eq!(g, vec![0, 0, 0]);
    }

    #[test]
    fn config_validation() {
        assert!(SegConfig::default().validate().is_ok());
        assert!(SegConfig {
            theta_r: 1.0,
            ..SegConfig::default()
        }
        .validate()
        .is_err());
        assert!(SegConfig {
            variance_window: 0,
            ..SegConfig::default()
        }
        .validate()
        .is_err());
        assert!(SegConfig {
            theta_v_fraction: 0.0,
            ..SegConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn segments_json_shape() {
        let segs = vec![MotionSegment::new(3, 9, Some(Symbol::One)), MotionSegment::unlabeled(20, 30)];
        let json = segments_to_json(&segs).unwrap();
        assert!(json.contains("\"start_frame\": 3"));
        assert!(json.contains("\"label\": \"one\""));
        assert!(json.contains("\"label\": null"));
        assert_eq!(segments_from_json(&json).unwrap(), segs);
        assert!(segments_from_json(r#"[{"start_frame": 5, "end_frame": 1, "label": null}]"#).is_err());
    }
}
