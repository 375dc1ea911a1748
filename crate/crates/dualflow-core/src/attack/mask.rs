//! Random square masks: sampled squares are 0, everything else 1. Multiplied
//! against the perturbation, a zeroed square pins those pixels to the
//! original image, forcing adversarial structure to spread out.

use super::MaskConfig;
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Binary [h*w] mask with `cfg.squares` random squares set to 0.
pub fn random_square_mask(height: usize, width: usize, cfg: &MaskConfig, rng: &mut Rng) -> Result<Tensor> {
    if cfg.side_min == 0 || cfg.side_min > cfg.side_max {
        return Err(CoreError::InvalidArgument(format!(
            "square side range [{}, {}] invalid",
            cfg.side_min, cfg.side_max
        )));
    }
    if cfg.side_max > height || cfg.side_max > width {
        return Err(CoreError::InvalidArgument(format!(
            "square side {} exceeds image {height}x{width}",
            cfg.side_max
        )));
    }
    let mut mask = vec![1.0f32; height * width];
    for _ in 0..cfg.squares {
        let side = cfg.side_min + rng.below(cfg.side_max - cfg.side_min + 1);
        let y0 = rng.below(height - side + 1);
        let x0 = rng.below(width - side + 1);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                mask[y * width + x] = 0.0;
            }
        }
    }
    Tensor::new(vec![height * width], mask)
}
