//! Robust summaries shared by the engines and the analysis layer.
//!
//! Medians are used everywhere instead of means. For an even number of
//! samples the median is the arithmetic mean of the two middle values,
//! computed as `(a + b) / 2.0` in `f64`.

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        Some(sorted[mid])
    } else {
        Some((sorted[mid - 1] + sorted[mid]) / 2.0)
    }
}

/// Linearly interpolated quantile (the "type 7" definition), `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

pub fn iqr(values: &[f64]) -> Option<f64> {
    Some(quantile(values, 0.75)? - quantile(values, 0.25)?)
}

/// Rounds to one decimal place, ties away from zero for positive values.
///
/// Values whose scaled fractional part lies within 1e-9 of one half are
/// treated as exact ties, so binary representation error cannot turn
/// `x.x5` into a round-down.
pub fn round_half_up_1dp(value: f64) -> f64 {
    let scaled = value * 10.0;
    let floor = scaled.floor();
    let frac = scaled - floor;
    let rounded = if (frac - 0.5).abs() < 1e-9 || frac > 0.5 {
        floor + 1.0
    } else {
        floor
    };
    rounded / 10.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.25), Some(2.0));
        assert_eq!(quantile(&v, 0.75), Some(4.0));
        assert_eq!(iqr(&v), Some(2.0));
        assert_eq!(iqr(&[7.0]), Some(0.0));
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(round_half_up_1dp(400.106951871), 400.1);
        assert_eq!(round_half_up_1dp(0.25 * 10.0 / 10.0), 0.3);
        assert_eq!(round_half_up_1dp(12.35), 12.4);
        assert_eq!(round_half_up_1dp(12.34999), 12.3);
        assert_eq!(round_half_up_1dp(390.625), 390.6);
    }
}
