//! Dense f32 tensors and reverse-mode automatic differentiation.
//!
//! Storage is always f32 (checkpoints, datasets, parameters); tape arithmetic
//! runs in f64 so finite-difference gradient checks at h=1e-3 stay meaningful.

mod gradcheck;
mod optim;
mod params;
mod tape;

pub use gradcheck::{central_diff_max_rel_err, central_diff_max_rel_err_scaled, grad_check_tape};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Binding, ParamStore};
pub use tape::{Gradients, Tape, Var};

use crate::error::{CoreError, Result};

/// Dense multi-dimensional f32 array, row-major.
///
/// Invariants: `product(shape) == data.len()` and every element is finite,
/// both enforced at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::Shape(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(CoreError::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(format!(
                "tensor creation (element {bad} = {})",
                data[bad]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![v; numel])
    }

    pub fn scalar(v: f32) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f32> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(CoreError::Shape(format!("expected scalar, got shape {:?}", self.shape)))
        }
    }

    pub fn as_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Reinterpret as a new shape with identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(CoreError::Shape(format!(
                "cannot reshape {:?} ({} elems) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn linf_dist(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(CoreError::Shape(format!(
                "linf_dist shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max))
    }

    pub fn l2_dist(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(CoreError::Shape(format!(
                "l2_dist shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a as f64) - (*b as f64);
                d * d
            })
            .sum();
        Ok(s.sqrt() as f32)
    }

    /// Extract row `i` of a [rows, cols] tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        if self.shape.len() < 2 {
            return Err(CoreError::Shape("row() needs ndim >= 2".into()));
        }
        let rows = self.shape[0];
        let cols: usize = self.shape[1..].iter().product();
        if i >= rows {
            return Err(CoreError::Shape(format!("row {i} out of {rows}")));
        }
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * cols..(i + 1) * cols].to_vec(),
        })
    }

    /// Stack equal-shape tensors as rows of a new leading dimension.
    pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
        let first = rows
            .first()
            .ok_or_else(|| CoreError::Shape("stack_rows on empty list".into()))?;
        let mut data = Vec::with_capacity(first.numel() * rows.len());
        for r in rows {
            if r.shape != first.shape {
                return Err(CoreError::Shape("stack_rows shape mismatch".into()));
            }
            data.extend_from_slice(&r.data);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn creation_validates_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn creation_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(CoreError::NonFinite(_))
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f32::INFINITY]),
            Err(CoreError::NonFinite(_))
        ));
    }

    #[test]
    fn linf_dist_basic() {
        let a = Tensor::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![3], vec![0.5, 1.0, 1.0]).unwrap();
        assert_eq!(a.linf_dist(&b).unwrap(), 1.0);
    }

    #[test]
    fn row_and_stack_roundtrip() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let r0 = t.row(0).unwrap();
        let r1 = t.row(1).unwrap();
        assert_eq!(r0.data(), &[1., 2., 3.]);
        let back = Tensor::stack_rows(&[r0, r1]).unwrap();
        assert_eq!(back, t);
    }
}
