//! Procedural datasets and the two training loops (flow-matching pretraining,
//! classifier training).

mod cache;
mod gmm;
mod pretrain;
mod shapes;
mod train_cls;

pub use cache::{read_dataset_cache, write_dataset_cache, DatasetHeader};
pub use gmm::generate_gmm2d;
pub use pretrain::{pretrain_flow_matching, PretrainOutcome};
pub use shapes::{generate_shapes, SHAPE_CLASSES, SHAPE_SIDE};
pub use train_cls::{accuracy, train_classifier, TrainedClassifier};

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::{OptimizerKind, Tensor};

/// Inputs as rows of a [n, d] tensor plus one label per row.
#[derive(Debug, Clone)]
pub struct LabeledData {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledData {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.shape()[0] != labels.len() {
            return Err(CoreError::Shape(format!(
                "inputs {:?} vs {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(CoreError::InvalidArgument(format!("label {bad} out of 0..{classes}")));
        }
        Ok(LabeledData { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Rows at `idx`, stacked.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(CoreError::InvalidArgument(format!("index {i} out of {}", self.len())));
            }
            data.extend_from_slice(&self.inputs.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![idx.len(), d], data)?, labels))
    }

    /// Deterministic shuffled split into (train, test).
    pub fn split(&self, test_frac: f32, rng: &mut Rng) -> Result<(LabeledData, LabeledData)> {
        if !(test_frac > 0.0 && test_frac <= 0.5) {
            return Err(CoreError::InvalidArgument(format!(
                "split fraction {test_frac} outside (0, 0.5]"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let n_test = ((self.len() as f32) * test_frac).round() as usize;
        let n_test = n_test.clamp(1, self.len() - 1);
        let (test_idx, train_idx) = idx.split_at(n_test);
        let (test_x, test_y) = self.batch(test_idx)?;
        let (train_x, train_y) = self.batch(train_idx)?;
        Ok((
            LabeledData::new(train_x, train_y, self.classes)?,
            LabeledData::new(test_x, test_y, self.classes)?,
        ))
    }
}

/// Shared knobs for both training loops.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub eval_split: f32,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.eval_split > 0.0 && self.eval_split <= 0.5) {
            return Err(CoreError::InvalidArgument(format!(
                "eval_split {} outside (0, 0.5]",
                self.eval_split
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(CoreError::InvalidArgument(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            eval_split: 0.2,
        }
    }
}
