//! 2-D gaussian-mixture sanity dataset: K isotropic components spaced on a
//! circle. Fast to train against and easy to reason about.

use super::LabeledData;
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const GMM_RADIUS: f64 = 2.0;
pub const GMM_STD: f64 = 0.3;

/// Class-balanced draws from K gaussians centered at angle 2*pi*k/K on a
/// radius-2 circle, std 0.3. Labels are component indices.
pub fn generate_gmm2d(seed: u64, n: usize, k: usize) -> Result<LabeledData> {
    if k < 2 {
        return Err(CoreError::InvalidArgument(format!("need >= 2 components, got {k}")));
    }
    if n < k {
        return Err(CoreError::InvalidArgument(format!("need at least {k} samples, got {n}")));
    }
    let mut rng = Rng::seed_from(seed).fork(0x474D_4D32); // gmm stream
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let angle = std::f64::consts::TAU * class as f64 / k as f64;
        let cx = GMM_RADIUS * angle.cos();
        let cy = GMM_RADIUS * angle.sin();
        data.push((cx + GMM_STD * rng.normal_f64()) as f32);
        data.push((cy + GMM_STD * rng.normal_f64()) as f32);
        labels.push(class);
    }
    LabeledData::new(Tensor::new(vec![n, 2], data)?, labels, k)
}
