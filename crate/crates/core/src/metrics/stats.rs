//! Median and nonparametric confidence interval of the median.

use serde::Serialize;

use crate::{Error, Result};

/// Repeated-run statistics. `ci_low`, `ci_high`, `min` and `max` are
/// observed samples; `median` averages the two middle samples when `n` is
/// even.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// 1-based order statistics used for the interval.
    pub ci_ranks: (usize, usize),
    /// Binomial coverage of the interval. Below 95% only for the min/max
    /// fallback used when the sample is too small.
    pub coverage: f64,
}

pub const CI_LEVEL: f64 = 0.95;

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// `P(j ≤ B ≤ n−j)` for `B ~ Binomial(n, 1/2)`, i.e. the coverage of the
/// interval between the `j`-th and `(n+1−j)`-th order statistics.
pub fn order_statistic_coverage(n: usize, j: usize) -> f64 {
    if j == 0 || 2 * j > n + 1 {
        return 0.0;
    }
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0; // ln C(n, 0)
    let mut total = 0.0;
    for i in 0..=n {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= j && i <= n - j {
            total += (ln_choose + ln_half_n).exp();
        }
    }
    total
}

/// Ranks `(j, n+1−j)` of the narrowest symmetric interval with coverage at
/// least `level`, or `None` if even `(1, n)` falls short.
pub fn ci_ranks(n: usize, level: f64) -> Option<(usize, usize, f64)> {
    (1..=n.div_ceil(2))
        .rev()
        .map(|j| (j, n + 1 - j, order_statistic_coverage(n, j)))
        .find(|&(_, _, c)| c >= level)
}

impl Summary {
    pub fn of(samples: &[f64]) -> Result<Summary> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no samples".into()));
        }
        if samples.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN sample".into()));
        }
        let mut s = samples.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len();
        let (lo, hi, coverage) = ci_ranks(n, CI_LEVEL).unwrap_or((1, n, order_statistic_coverage(n, 1)));
        Ok(Summary {
            n,
            median: median(&s),
            ci_low: s[lo - 1],
            ci_high: s[hi - 1],
            min: s[0],
            max: s[n - 1],
            mean: s.iter().sum::<f64>() / n as f64,
            ci_ranks: (lo, hi),
            coverage,
        })
    }

    /// Same statistics in another unit.
    pub fn scaled(&self, factor: f64) -> Summary {
        Summary {
            median: self.median * factor,
            ci_low: self.ci_low * factor,
            ci_high: self.ci_high * factor,
            min: self.min * factor,
            max: self.max * factor,
            mean: self.mean * factor,
            ..*self
        }
    }
}
