//! Moment estimates and their Monte Carlo standard errors for correlated
//! chain output.

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

pub fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64
}

/// Standard error of the mean of `x` from `batches` non-overlapping batch
/// means; accounts for autocorrelation as long as batches are long compared
/// with the chain's correlation time.
pub fn batch_means_se(x: &[f64], batches: usize) -> f64 {
    let len = x.len() / batches;
    assert!(len >= 2, "need at least two values per batch");
    let means: Vec<f64> = x.chunks_exact(len).take(batches).map(mean).collect();
    let var = variance(&means) * batches as f64 / (batches as f64 - 1.0);
    (var / batches as f64).sqrt()
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `x` and `cdf`.
pub fn ks_statistic(x: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &xi)| {
            let f = cdf(xi);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
