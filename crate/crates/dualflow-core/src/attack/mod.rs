//! Cascading per-timestep attack training, dual-flow sampling, and the
//! masked single-target fine-tuning variant.

mod mask;
mod sample;
mod train;

pub use mask::random_square_mask;
pub use sample::{linf_project, sample_dual_flow, sample_dual_flow_batch};
pub use train::{finetune_single_target, train_dual_flow, TrainOutcome};

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::flow::{FlowSchedule, NoiseSpec};
use crate::tensor::{OptimizerKind, Tensor};

/// Training variant: deterministic cascade, stochastic cascade, or
/// random-timestep noising.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackVariant {
    /// cascade over the deterministic reverse trajectory ("co")
    CascadeOde,
    /// noise directly at tau, stochastic reverse steps ("cs")
    CascadeSde,
    /// single update at a random timestep ("rs")
    RandomSde,
}

impl AttackVariant {
    pub fn name(self) -> &'static str {
        match self {
            AttackVariant::CascadeOde => "co",
            AttackVariant::CascadeSde => "cs",
            AttackVariant::RandomSde => "rs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "co" => Ok(AttackVariant::CascadeOde),
            "cs" => Ok(AttackVariant::CascadeSde),
            "rs" => Ok(AttackVariant::RandomSde),
            other => Err(CoreError::InvalidArgument(format!("unknown variant '{other}'"))),
        }
    }
}

/// Everything one attack-training run needs.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// l-infinity budget in data space
    pub epsilon: f32,
    pub lr: f32,
    /// optimizer-step budget for the whole run
    pub steps: usize,
    pub variant: AttackVariant,
    pub sched: FlowSchedule,
    /// clip the x0 prediction to [x - eps, x + eps] during training
    pub train_clip: bool,
    /// weight of the trajectory-matching penalty (0 disables)
    pub l2_weight: f32,
    /// training-time reverse noise (cs variant); gamma must be 0 for co
    pub noise: NoiseSpec,
    /// target class set C
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// keep class-embedding rows trainable alongside the adapters
    pub train_class_rows: bool,
    /// white-box ASR probe interval in optimizer steps (0 = ends only)
    pub eval_every: usize,
    /// data lives in [0, 1] (images): clamp sampler outputs accordingly
    pub unit_domain: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(epsilon: f32, sched: FlowSchedule, targets: Vec<usize>) -> Self {
        AttackConfig {
            epsilon,
            lr: 1e-3,
            steps: 1000,
            variant: AttackVariant::CascadeOde,
            sched,
            train_clip: true,
            l2_weight: 0.0,
            noise: NoiseSpec::deterministic(),
            targets,
            batch_size: 8,
            optimizer: OptimizerKind::Sgd,
            train_class_rows: true,
            eval_every: 0,
            unit_domain: true,
            seed: 0,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(CoreError::InvalidArgument(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.sched.tau() >= 1.0 {
            return Err(CoreError::InvalidArgument("attack schedule needs tau < 1".into()));
        }
        if self.targets.is_empty() {
            return Err(CoreError::InvalidArgument("empty target set".into()));
        }
        if let Some(&bad) = self.targets.iter().find(|&&c| c >= num_classes) {
            return Err(CoreError::InvalidArgument(format!("target {bad} out of 0..{num_classes}")));
        }
        if self.variant == AttackVariant::CascadeOde && self.noise.gamma != 0.0 {
            return Err(CoreError::InvalidArgument(
                "deterministic cascade forces noise gamma = 0 in training".into(),
            ));
        }
        if self.noise.gamma < 0.0 {
            return Err(CoreError::InvalidArgument("noise gamma must be >= 0".into()));
        }
        if self.l2_weight < 0.0 {
            return Err(CoreError::InvalidArgument("l2_weight must be >= 0".into()));
        }
        if self.l2_weight > 0.0 && self.variant != AttackVariant::CascadeOde {
            return Err(CoreError::InvalidArgument(
                "trajectory penalty needs the deterministic cascade variant".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(CoreError::InvalidArgument(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Random square masks for single-target fine-tuning.
#[derive(Debug, Clone)]
pub struct MaskConfig {
    pub squares: usize,
    pub side_min: usize,
    pub side_max: usize,
    pub seed: u64,
}

/// One adversarial example with its provenance.
#[derive(Debug, Clone)]
pub struct AdvSample {
    /// original input x
    pub original: Tensor,
    /// reverse-flow output before the budget clip
    pub pre_clip: Tensor,
    /// budget-clipped (and [0,1]-clamped) output
    pub clipped: Tensor,
    /// target class c
    pub target: usize,
    /// per-model argmax predictions, filled by evaluation
    pub predictions: BTreeMap<String, usize>,
}

impl AdvSample {
    /// delta = clipped - original, recomputed in f32.
    pub fn perturbation(&self) -> Tensor {
        let data: Vec<f32> = self
            .clipped
            .data()
            .iter()
            .zip(self.original.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor::new(self.original.shape().to_vec(), data).expect("finite difference")
    }

    /// Largest |clipped - original| coordinate, f32 arithmetic.
    pub fn linf(&self) -> f32 {
        self.perturbation().data().iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}
