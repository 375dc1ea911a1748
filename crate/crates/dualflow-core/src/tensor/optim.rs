//! Parameter updates: plain SGD and Adam.

use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(CoreError::InvalidArgument(format!("unknown optimizer '{other}'"))),
        }
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Applies gradient steps to trainable parameters. Adam keeps per-parameter
/// moment state across steps (beta1=0.9, beta2=0.999, eps=1e-8).
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    step_count: u64,
    adam: BTreeMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Optimizer { kind, lr, step_count: 0, adam: BTreeMap::new() }
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// One update over `grads`. Every gradient must belong to a known,
    /// trainable parameter of matching shape; frozen parameters stay put.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = store
                .entries
                .get(name)
                .ok_or_else(|| CoreError::Param(format!("gradient for unknown parameter '{name}'")))?;
            if !p.trainable {
                return Err(CoreError::Param(format!("gradient for frozen parameter '{name}'")));
            }
            if p.value.shape() != g.shape() {
                return Err(CoreError::Shape(format!(
                    "gradient shape {:?} vs parameter '{name}' {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        self.step_count += 1;
        let lr = self.lr as f64;
        for (name, g) in grads {
            let p = store.entries.get_mut(name).expect("validated above");
            let new_data: Vec<f32> = match self.kind {
                OptimizerKind::Sgd => p
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&w, &gi)| (w as f64 - lr * gi as f64) as f32)
                    .collect(),
                OptimizerKind::Adam => {
                    const BETA1: f64 = 0.9;
                    const BETA2: f64 = 0.999;
                    const EPS: f64 = 1e-8;
                    let n = p.value.numel();
                    let st = self
                        .adam
                        .entry(name.clone())
                        .or_insert_with(|| AdamState { m: vec![0.0; n], v: vec![0.0; n] });
                    let t = self.step_count as i32;
                    let bc1 = 1.0 - BETA1.powi(t);
                    let bc2 = 1.0 - BETA2.powi(t);
                    p.value
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &w)| {
                            let gi = g.data()[i] as f64;
                            st.m[i] = BETA1 * st.m[i] + (1.0 - BETA1) * gi;
                            st.v[i] = BETA2 * st.v[i] + (1.0 - BETA2) * gi * gi;
                            let mhat = st.m[i] / bc1;
                            let vhat = st.v[i] / bc2;
                            (w as f64 - lr * mhat / (vhat.sqrt() + EPS)) as f32
                        })
                        .collect()
                }
            };
            p.value = Tensor::new(p.value.shape().to_vec(), new_data)?;
        }
        Ok(())
    }
}
