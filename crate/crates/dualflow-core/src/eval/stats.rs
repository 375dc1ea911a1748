//! Split-based confidence intervals for success rates.

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub half_width: f64,
}

/// mean +- z * s / sqrt(k) over k disjoint-split values, with s the sample
/// standard deviation (k - 1 denominator). Needs at least two splits.
pub fn split_confidence_interval(values: &[f32], z: f64) -> Result<ConfidenceInterval> {
    if values.len() < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "confidence interval needs >= 2 splits, got {}",
            values.len()
        )));
    }
    let k = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / k;
    let var =
        values.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / (k - 1.0);
    let s = var.sqrt();
    Ok(ConfidenceInterval { mean, half_width: z * s / k.sqrt() })
}
