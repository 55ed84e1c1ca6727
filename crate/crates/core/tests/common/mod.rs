//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Γ(k/2) for integer k ≥ 1 by the half-integer recurrence.
fn gamma_half(k: usize) -> f64 {
    let mut g = if k.is_multiple_of(2) { 1.0 } else { PI.sqrt() };
    let mut x = if k.is_multiple_of(2) { 1.0 } else { 0.5 };
    while x < k as f64 / 2.0 {
        g *= x;
        x += 1.0;
    }
    g
}

fn chi2_pdf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = df as f64;
    x.powf(k / 2.0 - 1.0) * (-x / 2.0).exp() / (2f64.powf(k / 2.0) * gamma_half(df))
}

/// CDF by the midpoint rule in `u = sqrt(x)`; the substitution removes the
/// singularity at zero for one degree of freedom.
pub fn chi2_cdf(x: f64, df: usize) -> f64 {
    let n = 200_000;
    let h = x.sqrt() / n as f64;
    (0..n)
        .map(|i| {
            let u = (i as f64 + 0.5) * h;
            chi2_pdf(u * u, df) * 2.0 * u
        })
        .sum::<f64>()
        * h
}

/// Upper-tail critical value: the `1 - alpha` quantile, by bisection.
pub fn chi2_critical(alpha: f64, df: usize) -> f64 {
    let (mut lo, mut hi) = (0.0, 200.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, df) < 1.0 - alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Pearson statistic of observed counts against a uniform expectation.
pub fn chi2_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

/// Masked-position MSE by explicit loops: mean over masked tokens of the
/// mean squared error across the token dimension.
pub fn masked_mse_oracle(pred: &[f64], target: &[f64], masked: &[Vec<usize>], n: usize, d: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, positions) in masked.iter().enumerate() {
        for &j in positions {
            for k in 0..d {
                let i = (b * n + j) * d + k;
                total += (pred[i] - target[i]).powi(2);
            }
            count += 1;
        }
    }
    total / (count * d) as f64
}

/// Round-half-up of `n · (1 - ratio)` for ratio = q/4, in integers.
pub fn visible_oracle(n: usize, quarter_masked: usize) -> usize {
    let kept_quarters = 4 - quarter_masked;
    // n·k/4 rounded half up = floor((2nk + 4) / 8)
    ((2 * n * kept_quarters + 4) / 8).max(1)
}
