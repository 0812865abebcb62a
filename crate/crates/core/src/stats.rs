//! Goodness-of-fit helpers used to check sampled pose distributions.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Statistic and asymptotic p-value of a KS test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

fn ks_p_value(d: f64, effective_n: f64) -> f64 {
    let sn = effective_n.sqrt();
    kolmogorov_q((sn + 0.12 + 0.11 / sn) * d)
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Statistical("non-finite sample".into()));
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// One-sample KS test against a continuous CDF.
pub fn ks_one_sample(xs: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsResult> {
    if xs.is_empty() {
        return Err(Error::Statistical("KS test on an empty sample".into()));
    }
    let v = sorted(xs)?;
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    Ok(KsResult { statistic: d, p_value: ks_p_value(d, n) })
}

/// Two-sample KS test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Statistical("KS test on an empty sample".into()));
    }
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(KsResult { statistic: d, p_value: ks_p_value(d, na * nb / (na + nb)) })
}

/// Pearson chi-square test of observed counts against expected counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

pub fn chi_square(observed: &[u64], expected: &[f64]) -> Result<ChiSquareResult> {
    if observed.len() != expected.len() || observed.len() < 2 {
        return Err(Error::Statistical("chi-square needs matching counts over at least two cells".into()));
    }
    if expected.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::Statistical("chi-square expected counts must be positive".into()));
    }
    let statistic: f64 = observed.iter().zip(expected).map(|(&o, &e)| (o as f64 - e).powi(2) / e).sum();
    let dof = observed.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Statistical(e.to_string()))?;
    Ok(ChiSquareResult { statistic, dof, p_value: 1.0 - dist.cdf(statistic) })
}

/// CDF of `Normal(0, std)` truncated to `[-limit, limit]`.
pub fn truncated_normal_cdf(x: f64, std: f64, limit: f64) -> f64 {
    if x <= -limit {
        return 0.0;
    }
    if x >= limit {
        return 1.0;
    }
    if std <= 0.0 {
        return if x >= 0.0 { 1.0 } else { 0.0 };
    }
    let n = Normal::new(0.0, std).expect("positive std");
    let lo = n.cdf(-limit);
    (n.cdf(x) - lo) / (n.cdf(limit) - lo)
}
