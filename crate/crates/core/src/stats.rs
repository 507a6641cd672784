//! Small numerical summaries: stable sums, HPD intervals, goodness of fit.

use crate::error::{Error, Result};

/// Pairwise summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two points.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
    pairwise_sum(&dev) / (xs.len() - 1) as f64
}

/// Shortest interval spanning `ceil(level * M)` sorted sample points; the
/// first such window wins ties.
pub fn hpd_interval(sample: &[f64], level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("HPD level must lie in (0, 1), got {level}")));
    }
    if sample.len() < 20 {
        return Err(Error::Domain(format!("HPD needs at least 20 draws, got {}", sample.len())));
    }
    if sample.iter().any(|x| x.is_nan()) {
        return Err(Error::Domain("HPD sample contains NaN".into()));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    // guard against level * m landing a hair above an integer
    let k = ((level * m as f64) - 1e-9).ceil().max(1.0) as usize;
    let k = k.min(m);
    let mut best = (0, sorted[k - 1] - sorted[0]);
    for i in 1..=m - k {
        let width = sorted[i + k - 1] - sorted[i];
        if width < best.1 {
            best = (i, width);
        }
    }
    Ok((sorted[best.0], sorted[best.0 + k - 1]))
}

/// Kolmogorov-Smirnov statistic of `sample` against `cdf`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic one-sample KS critical value at significance `alpha`.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}
