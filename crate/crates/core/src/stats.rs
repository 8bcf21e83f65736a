//! Small sample-statistics helpers shared by the diagnostics.

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn mean(xs: &[f64]) -> f64 {
    mean_se(xs).0
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Linear-interpolated empirical quantile, `q` in `[0, 1]`.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    v[lo] * (1.0 - w) + v[hi] * w
}

/// `ln(mean(exp(xs)))` with its delta-method standard error.
///
/// Computed with a max shift so that large exponents do not overflow.
pub fn log_mean_exp(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let shift = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - shift).exp()).collect();
    let (m, se) = mean_se(&e);
    (shift + m.ln(), se / m)
}

/// Share of the total of the nonnegative sample `xs` carried by its largest `frac` fraction.
pub fn top_share(xs: &[f64], frac: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = ((frac * v.len() as f64).ceil() as usize).clamp(1, v.len());
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    v[..k].iter().sum::<f64>() / total
}

/// Same as [`top_share`] for a sample given by its logarithms.
pub fn top_share_log(log_xs: &[f64], frac: f64) -> f64 {
    if log_xs.is_empty() {
        return 0.0;
    }
    let shift = log_xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = log_xs.iter().map(|x| (x - shift).exp()).collect();
    top_share(&e, frac)
}
