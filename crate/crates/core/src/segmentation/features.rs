use crate::event::FrameSeries;

/// Per-frame share of positive events, `R_n = P_n / Q_n`. Frames without
/// events get `empty_ratio`.
pub fn compute_pner(frames: &FrameSeries, empty_ratio: f64) -> Vec<f64> {
    frames
        .frames
        .iter()
        .map(|f| if f.total == 0 { empty_ratio } else { f.pos as f64 / f.total as f64 })
        .collect()
}

/// Centered windowed population variance of the per-frame totals. The window
/// spans `n - W/2 ..= n + W/2`, truncated at the series ends; mean and
/// variance divide by the number of frames actually in range.
pub fn compute_efv(totals: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = totals.len();
    (0..n)
        .map(|i| {
            let w = &totals[i.saturating_sub(half)..(i + half + 1).min(n)];
            let len = w.len() as f64;
            let mean = w.iter().sum::<f64>() / len;
            let var = w.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / len;
            var.max(0.0)
        })
        .collect()
}

/// Centered moving average over `k/2` frames on each side, truncated at the
/// ends. Output length equals input length.
pub fn smooth(series: &[f64], k: usize) -> Vec<f64> {
    let half = k / 2;
    let n = series.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for &v in series {
        acc += v;
        prefix.push(acc);
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let mean = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
            // clamp away rounding drift outside the window's range
            let (mn, mx) = series[lo..hi]
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            mean.clamp(mn, mx)
        })
        .collect()
}

/// Lower median (element `(n-1)/2` of the sorted values); 0 for empty input.
pub fn lower_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force windowed variance written independently of `compute_efv`.
    fn efv_oracle(t: &[f64], w: usize) -> Vec<f64> {
        let h = (w / 2) as i64;
        (0..t.len() as i64)
            .map(|n| {
                let vals: Vec<f64> = (n - h..=n + h)
                    .filter(|&k| k >= 0 && (k as usize) < t.len())
                    .map(|k| t[k as usize])
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64
            })
            .collect()
    }

    #[test]
    fn pner_cases() {
        let fs = FrameSeries::from_counts(33, &[(5, 5), (10, 0), (0, 0), (1, 3)]);
        assert_eq!(compute_pner(&fs, 0.5), vec![0.5, 1.0, 0.5, 0.25]);
        assert_eq!(compute_pner(&fs, 0.0)[2], 0.0);
    }

    #[test]
    fn efv_constant_is_zero() {
        assert!(compute_efv(&[7.0; 25], 10).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn efv_two_frames() {
        assert_eq!(compute_efv(&[0.0, 10.0], 2), vec![25.0, 25.0]);
    }

    #[test]
    fn efv_impulse_support() {
        let mut t = vec![0.0; 30];
        t[12] = 100.0;
        let v = compute_efv(&t, 10);
        for (n, &val) in v.iter().enumerate() {
            assert_eq!(val > 0.0, n.abs_diff(12) <= 5, "frame {n}");
        }
        assert_eq!(v, efv_oracle(&t, 10));
    }

    #[test]
    fn smooth_hand_computed() {
        let s = smooth(&[0.0, 0.0, 5.0, 0.0, 0.0], 5);
        let want = [5.0 / 3.0, 5.0 / 4.0, 1.0, 5.0 / 4.0, 5.0 / 3.0];
        for (a, b) in s.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(smooth(&[3.0; 8], 5), vec![3.0; 8]);
        assert!(smooth(&[], 5).is_empty());
    }

    #[test]
    fn lower_median_even_length() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), 2.0);
        assert_eq!(lower_median(&[5.0]), 5.0);
    }

    proptest! {
        #[test]
        fn pner_matches_division(counts in proptest::collection::vec((0u64..500, 0u64..500), 1..60)) {
            let fs = FrameSeries::from_counts(33, &counts);
            let r = compute_pner(&fs, 0.5);
            for ((p, n), r) in counts.iter().zip(&r) {
                prop_assert!((0.0..=1.0).contains(r));
                if p + n > 0 {
                    prop_assert!((r - *p as f64 / (*p + *n) as f64).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn efv_matches_oracle(t in proptest::collection::vec(0u32..1000, 1..80), w in 1usize..16) {
            let t: Vec<f64> = t.into_iter().map(f64::from).collect();
            let v = compute_efv(&t, w);
            for (a, b) in v.iter().zip(efv_oracle(&t, w)) {
                prop_assert!(*a >= 0.0);
                prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            }
        }

        #[test]
        fn smooth_within_extrema(s in proptest::collection::vec(-1e3f64..1e3, 1..80), k in 1usize..12) {
            let out = smooth(&s, k);
            prop_assert_eq!(out.len(), s.len());
            let mn = s.iter().copied().fold(f64::INFINITY, f64::min);
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in out {
                prop_assert!(v >= mn && v <= mx);
            }
        }
    }
}
