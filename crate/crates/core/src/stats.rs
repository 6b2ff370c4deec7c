//! Small order-statistics helpers shared by the fingerprint and the
//! detection reducers.

/// Linear-interpolation percentile (`q` in `[0, 100]`) of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let rank = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Same as [`percentile_sorted`] but works on unsorted data in O(n) by
/// selecting only the two bracketing order statistics.
pub fn percentile_select(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty sample");
    let n = values.len();
    let rank = (q / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    let (_, lo_val, right) = values.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_val = *lo_val;
    let hi_val = if hi == lo {
        lo_val
    } else {
        right.iter().copied().min_by(f64::total_cmp).unwrap_or(lo_val)
    };
    lo_val + (hi_val - lo_val) * frac
}

/// Population mean and standard deviation, two-pass.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Median with the midpoint convention for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0, "median of empty sample");
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
