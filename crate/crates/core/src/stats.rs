//! Small statistics toolbox shared by the experiment modules: moment
//! summaries, binomial confidence intervals, two-sample Kolmogorov-Smirnov,
//! and percentile bootstrap. Everything an experiment reports is a
//! [`PointEstimate`] so confidence information is never dropped.

use crate::error::{Error, Result};
use serde::Serialize;

/// A point estimate with a two-sided confidence interval and provenance.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PointEstimate {
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub replicas: u64,
    pub seed: u64,
}

/// Running mean and variance (Welford). Numerically stable for the long
/// accumulations the replica farms produce.
#[derive(Clone, Copy, Debug, Default)]
pub struct Accumulator {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance. Zero for fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn estimate(&self, seed: u64) -> PointEstimate {
        let half = 1.959963984540054 * self.std_err();
        PointEstimate {
            value: self.mean(),
            ci_lo: self.mean() - half,
            ci_hi: self.mean() + half,
            replicas: self.n,
            seed,
        }
    }
}

/// Standard normal upper tail `P(Z >= z)`.
pub fn normal_upper_tail(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    1.0 - normal_upper_tail(z)
}

/// Wilson score interval for a binomial proportion at confidence `1 - alpha`.
pub fn wilson_interval(successes: u64, trials: u64, alpha: f64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::stats("wilson interval needs at least one trial"));
    }
    if successes > trials {
        return Err(Error::stats("successes exceed trials"));
    }
    if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return Err(Error::stats("alpha must lie in (0, 1)"));
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

/// Inverse standard normal CDF (Acklam's rational approximation, |err| < 1.2e-9,
/// tightened by one Newton step with the exact CDF).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile argument must be in (0,1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    let x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // One Newton step: phi'(x) never vanishes.
    let e = normal_cdf(x) - p;
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    x - e / pdf
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::stats("KS requires non-empty samples"));
    }
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_unstable_by(|u, v| u.total_cmp(v));
    ys.sort_unstable_by(|u, v| u.total_cmp(v));
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let t = xs[i].min(ys[j]);
        while i < n && xs[i] <= t {
            i += 1;
        }
        while j < m && ys[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    Ok(d)
}

/// Critical value for the two-sample KS test at level `alpha` (asymptotic
/// Smirnov formula `c(alpha) * sqrt((n+m)/(n m))`).
pub fn ks_critical(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Outcome of a two-sample KS test.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct KsTest {
    pub statistic: f64,
    pub critical: f64,
    pub rejected: bool,
}

pub fn ks_test(a: &[f64], b: &[f64], alpha: f64) -> Result<KsTest> {
    let statistic = ks_statistic(a, b)?;
    let critical = ks_critical(a.len(), b.len(), alpha);
    Ok(KsTest {
        statistic,
        critical,
        rejected: statistic > critical,
    })
}

/// Percentile bootstrap over precomputed replicate statistics.
pub fn percentile_ci(replicates: &mut [f64], alpha: f64) -> Result<(f64, f64)> {
    if replicates.is_empty() {
        return Err(Error::stats("empty bootstrap replicate set"));
    }
    replicates.sort_unstable_by(|u, v| u.total_cmp(v));
    let n = replicates.len();
    let idx = |q: f64| -> f64 {
        let pos = q * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        replicates[lo] * (1.0 - frac) + replicates[hi] * frac
    };
    Ok((idx(alpha / 2.0), idx(1.0 - alpha / 2.0)))
}

/// Median of a sample (averaging the two central order statistics).
pub fn median(xs: &mut [f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::stats("median of empty sample"));
    }
    xs.sort_unstable_by(|u, v| u.total_cmp(v));
    let n = xs.len();
    Ok(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}
