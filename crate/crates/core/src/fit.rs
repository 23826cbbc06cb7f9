//! Ordinary least-squares straight-line fit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("all x values are equal")]
    DegenerateX,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// `y_i - (slope * x_i + intercept)` in input order.
    pub residuals: Vec<f64>,
}

impl LinearFit {
    pub fn max_abs_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn rss(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum()
    }
}

/// Fits `y = slope * x + intercept`. Uses centered sums, which stay accurate
/// when x is large relative to its spread.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<LinearFit, FitError> {
    if points.len() < 2 {
        return Err(FitError::TooFewPoints(points.len()));
    }
    let n = points.len() as f64;
    let x_mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (sxx, sxy) = points.iter().fold((0.0, 0.0), |(sxx, sxy), &(x, y)| {
        let dx = x - x_mean;
        (sxx + dx * dx, sxy + dx * (y - y_mean))
    });
    if sxx == 0.0 {
        return Err(FitError::DegenerateX);
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let residuals = points.iter().map(|&(x, y)| y - (slope * x + intercept)).collect();
    Ok(LinearFit {
        slope,
        intercept,
        residuals,
    })
}
