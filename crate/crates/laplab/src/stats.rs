//! Estimation helpers: batch means, medians, least squares.

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("regression is degenerate: {0}")]
    DegenerateRegression(String),
}

/// Point estimate with a confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

/// Two-sided Student-t quantile used for confidence intervals.
pub fn t_quantile(confidence: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .expect("valid t distribution")
        .inverse_cdf(0.5 + confidence / 2.0)
}

/// Treat the values (batch averages or replication results) as approximately
/// independent and form a t-based confidence interval for their mean.
pub fn batch_means(values: &[f64], confidence: f64) -> Result<Estimate, StatsError> {
    let k = values.len();
    if k < 2 {
        return Err(StatsError::InsufficientData { needed: 2, got: k });
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k as f64 - 1.0);
    let half_width = t_quantile(confidence, k as f64 - 1.0) * (var / k as f64).sqrt();
    Ok(Estimate { mean, half_width })
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Ordinary least squares y = intercept + slope x.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

pub fn ols(x: &[f64], y: &[f64]) -> Result<OlsFit, StatsError> {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 3 {
        return Err(StatsError::InsufficientData { needed: 3, got: n });
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx < 1e-300 {
        return Err(StatsError::DegenerateRegression(
            "all regressor values are equal".to_string(),
        ));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - intercept - slope * a;
            e * e
        })
        .sum();
    let sigma2 = rss / (n as f64 - 2.0);
    Ok(OlsFit {
        slope,
        intercept,
        slope_stderr: (sigma2 / sxx).sqrt(),
    })
}
