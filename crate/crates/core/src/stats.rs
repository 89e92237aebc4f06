//! Small statistics helpers: running moments and least-squares log-log fits.

use serde::{Deserialize, Serialize};

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean, stderr, n }
    }
}

/// Slope of an ordinary least-squares line with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
}

/// Fits `y = a + b x`. With two points the standard error is reported as 0.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> SlopeFit {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    assert!(xs.len() >= 2, "need at least two points");
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if xs.len() > 2 {
        let rss: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    SlopeFit {
        slope,
        intercept,
        stderr,
    }
}

/// Least-squares slope of `ln y` against `ln x`. Non-positive values are
/// rejected by returning NaN.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> SlopeFit {
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return SlopeFit {
            slope: f64::NAN,
            intercept: f64::NAN,
            stderr: f64::NAN,
        };
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly)
}

/// Indices of the points inside the largest decade `[x_max / 10, x_max]`.
pub fn last_decade(xs: &[f64]) -> Vec<usize> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    xs.iter()
        .enumerate()
        .filter(|(_, &x)| x >= max / 10.0 * (1.0 - 1e-12))
        .map(|(i, _)| i)
        .collect()
}
