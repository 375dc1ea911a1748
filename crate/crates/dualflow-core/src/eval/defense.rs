//! Input-processing defenses: gaussian smoothing, median smoothing, and value
//! quantization (the lossy-compression stand-in).

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DefenseSpec {
    None,
    /// separable gaussian blur with reflected borders
    GaussianSmooth { sigma: f32 },
    /// per-pixel window median with reflected borders; window odd
    MedianSmooth { window: usize },
    /// round(x * (levels-1)) / (levels-1); levels >= 2
    Quantize { levels: usize },
}

impl DefenseSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenseSpec::None => Ok(()),
            DefenseSpec::GaussianSmooth { sigma } => {
                if sigma < 0.0 || !sigma.is_finite() {
                    Err(CoreError::InvalidArgument(format!("sigma {sigma} must be >= 0")))
                } else {
                    Ok(())
                }
            }
            DefenseSpec::MedianSmooth { window } => {
                if window == 0 || window % 2 == 0 {
                    Err(CoreError::InvalidArgument(format!("median window {window} must be odd")))
                } else {
                    Ok(())
                }
            }
            DefenseSpec::Quantize { levels } => {
                if levels < 2 {
                    Err(CoreError::InvalidArgument(format!("levels {levels} must be >= 2")))
                } else {
                    Ok(())
                }
            }
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    // reflect-101-free simple mirror: ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - 1 - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Apply a defense to one flattened square grayscale image in [0, 1].
/// Shape and value range are preserved.
pub fn apply_defense(x: &Tensor, side: usize, spec: &DefenseSpec) -> Result<Tensor> {
    spec.validate()?;
    if x.numel() != side * side {
        return Err(CoreError::Shape(format!(
            "image of {} values is not {side}x{side}",
            x.numel()
        )));
    }
    let img = x.data();
    let out: Vec<f32> = match *spec {
        DefenseSpec::None => img.to_vec(),
        DefenseSpec::GaussianSmooth { sigma } => {
            if sigma == 0.0 {
                img.to_vec()
            } else {
                let radius = (3.0 * sigma).ceil() as isize;
                let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
                for k in -radius..=radius {
                    kernel.push((-(k * k) as f64 / (2.0 * sigma as f64 * sigma as f64)).exp());
                }
                let ksum: f64 = kernel.iter().sum();
                let kernel: Vec<f64> = kernel.into_iter().map(|v| v / ksum).collect();
                // horizontal then vertical pass
                let mut tmp = vec![0.0f64; side * side];
                for y in 0..side {
                    for xx in 0..side {
                        let mut acc = 0.0f64;
                        for (ki, k) in kernel.iter().enumerate() {
                            let sx = reflect(xx as isize + ki as isize - radius, side);
                            acc += k * img[y * side + sx] as f64;
                        }
                        tmp[y * side + xx] = acc;
                    }
                }
                let mut res = vec![0.0f32; side * side];
                for y in 0..side {
                    for xx in 0..side {
                        let mut acc = 0.0f64;
                        for (ki, k) in kernel.iter().enumerate() {
                            let sy = reflect(y as isize + ki as isize - radius, side);
                            acc += k * tmp[sy * side + xx];
                        }
                        res[y * side + xx] = (acc as f32).clamp(0.0, 1.0);
                    }
                }
                res
            }
        }
        DefenseSpec::MedianSmooth { window } => {
            let r = (window / 2) as isize;
            let mut res = vec![0.0f32; side * side];
            let mut buf = Vec::with_capacity(window * window);
            for y in 0..side {
                for xx in 0..side {
                    buf.clear();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let sy = reflect(y as isize + dy, side);
                            let sx = reflect(xx as isize + dx, side);
                            buf.push(img[sy * side + sx]);
                        }
                    }
                    buf.sort_by(|a, b| a.partial_cmp(b).expect("finite pixels"));
                    res[y * side + xx] = buf[buf.len() / 2];
                }
            }
            res
        }
        DefenseSpec::Quantize { levels } => {
            let q = (levels - 1) as f32;
            img.iter().map(|&v| (v * q).round() / q).collect()
        }
    };
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_image(side: usize, seed: u64) -> Tensor {
        let mut rng = Rng::seed_from(seed);
        let data: Vec<f32> = (0..side * side).map(|_| rng.uniform_f32()).collect();
        Tensor::new(vec![side * side], data).unwrap()
    }

    #[test]
    fn gaussian_sigma_zero_is_identity() {
        let img = random_image(8, 1);
        let out = apply_defense(&img, 8, &DefenseSpec::GaussianSmooth { sigma: 0.0 }).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn quantize_two_levels_is_idempotent() {
        let img = random_image(8, 2);
        let spec = DefenseSpec::Quantize { levels: 2 };
        let once = apply_defense(&img, 8, &spec).unwrap();
        let twice = apply_defense(&once, 8, &spec).unwrap();
        assert_eq!(once, twice);
        assert!(once.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn median_removes_salt_and_matches_sorting_oracle() {
        // flat background with one salt pixel
        let side = 8;
        let mut data = vec![0.2f32; side * side];
        data[3 * side + 4] = 1.0;
        let img = Tensor::new(vec![side * side], data.clone()).unwrap();
        let out = apply_defense(&img, side, &DefenseSpec::MedianSmooth { window: 3 }).unwrap();
        assert!(out.data()[3 * side + 4] < 0.5, "salt pixel survived");

        // brute-force per-pixel sorting oracle over the whole image
        for y in 0..side {
            for xx in 0..side {
                let mut vals = Vec::new();
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let sy = super::reflect(y as isize + dy, side);
                        let sx = super::reflect(xx as isize + dx, side);
                        vals.push(data[sy * side + sx]);
                    }
                }
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                assert_eq!(out.data()[y * side + xx], vals[4], "pixel ({y},{xx})");
            }
        }
    }

    #[test]
    fn defenses_preserve_shape_and_range() {
        let img = random_image(16, 3);
        for spec in [
            DefenseSpec::None,
            DefenseSpec::GaussianSmooth { sigma: 1.0 },
            DefenseSpec::MedianSmooth { window: 5 },
            DefenseSpec::Quantize { levels: 8 },
        ] {
            let out = apply_defense(&img, 16, &spec).unwrap();
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)), "{spec:?}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(DefenseSpec::MedianSmooth { window: 4 }.validate().is_err());
        assert!(DefenseSpec::MedianSmooth { window: 0 }.validate().is_err());
        assert!(DefenseSpec::Quantize { levels: 1 }.validate().is_err());
        assert!(DefenseSpec::GaussianSmooth { sigma: -1.0 }.validate().is_err());
    }

    #[test]
    fn gaussian_smooths_toward_local_mean() {
        let side = 8;
        let mut data = vec![0.0f32; side * side];
        data[4 * side + 4] = 1.0;
        let img = Tensor::new(vec![side * side], data).unwrap();
        let out = apply_defense(&img, side, &DefenseSpec::GaussianSmooth { sigma: 1.0 }).unwrap();
        // peak reduced, neighbors raised
        assert!(out.data()[4 * side + 4] < 0.5);
        assert!(out.data()[4 * side + 5] > 0.0);
        // mass approximately conserved away from borders
        let total: f32 = out.data().iter().sum();
        assert!((total - 1.0).abs() < 0.05, "total {total}");
    }
}
