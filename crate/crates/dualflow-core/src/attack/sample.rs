//! Dual-flow sampling: forward with the base field, reverse with the adapted
//! conditional field, then a hard l-infinity clip.

use std::collections::BTreeMap;

use super::AdvSample;
use crate::error::{CoreError, Result};
use crate::flow::{forward_integrate, reverse_integrate, FlowSchedule, NoiseSpec};
use crate::nn::{BatchCond, VelocityModel};
use crate::tensor::{ParamStore, Tensor};

/// Project `pre` onto the l-infinity ball of radius `eps` around `x`; with
/// `unit` set the result is additionally clamped into [0, 1] (valid for
/// image data where x itself lies in the unit interval, so the clamp cannot
/// leave the budget box).
///
/// Bounds are tightened by an ulp where f32 rounding of x +- eps would let the
/// recomputed difference exceed eps, so `|result - x| <= eps` holds bit-for-bit
/// when re-evaluated in f32. `eps = +inf` disables the projection entirely.
pub fn linf_project(pre: &Tensor, x: &Tensor, eps: f32, unit: bool) -> Result<Tensor> {
    if pre.shape() != x.shape() {
        return Err(CoreError::Shape(format!(
            "linf_project: {:?} vs {:?}",
            pre.shape(),
            x.shape()
        )));
    }
    if eps.is_infinite() {
        return Ok(pre.clone());
    }
    if !(eps > 0.0) {
        return Err(CoreError::InvalidArgument(format!("epsilon {eps} must be positive")));
    }
    if unit {
        if let Some(&bad) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::InvalidArgument(format!(
                "unit-interval projection with original value {bad} outside [0, 1]"
            )));
        }
    }
    let mut out = Vec::with_capacity(pre.numel());
    for (&p, &xi) in pre.data().iter().zip(x.data()) {
        let mut hi = xi + eps;
        while hi - xi > eps {
            hi = hi.next_down();
        }
        let mut lo = xi - eps;
        while xi - lo > eps {
            lo = lo.next_up();
        }
        let clipped = p.clamp(lo, hi);
        out.push(if unit { clipped.clamp(lo.max(0.0), hi.min(1.0)) } else { clipped });
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Run the sampling pipeline over a [B, d] batch with one target per row.
/// `eps = +inf` reproduces the unclipped output; `unit` clamps outputs to
/// [0, 1] (image data).
#[allow(clippy::too_many_arguments)]
pub fn sample_dual_flow_batch(
    model: &VelocityModel,
    store: &ParamStore,
    x: &Tensor,
    targets: &[usize],
    sched: &FlowSchedule,
    eps: f32,
    noise: &NoiseSpec,
    unit: bool,
) -> Result<Vec<AdvSample>> {
    if x.shape().len() != 2 || x.shape()[0] != targets.len() {
        return Err(CoreError::Shape(format!(
            "sample batch {:?} with {} targets",
            x.shape(),
            targets.len()
        )));
    }
    let use_lora = model.has_adapters();
    let (x_tau, _) = forward_integrate(
        |xs, t| model.eval(store, xs, t, BatchCond::Null, false),
        x,
        sched,
    )?;
    let (pre, _) = reverse_integrate(
        |xs, t| model.eval(store, xs, t, BatchCond::Classes(targets), use_lora),
        &x_tau,
        sched,
        noise,
    )?;
    let mut out = Vec::with_capacity(targets.len());
    for (row, &target) in targets.iter().enumerate() {
        let orig = x.row(row)?;
        let pre_row = pre.row(row)?;
        let clipped = linf_project(&pre_row, &orig, eps, unit)?;
        out.push(AdvSample {
            original: orig,
            pre_clip: pre_row,
            clipped,
            target,
            predictions: BTreeMap::new(),
        });
    }
    Ok(out)
}

/// Single-input convenience wrapper.
#[allow(clippy::too_many_arguments)]
pub fn sample_dual_flow(
    model: &VelocityModel,
    store: &ParamStore,
    x: &Tensor,
    target: usize,
    sched: &FlowSchedule,
    eps: f32,
    noise: &NoiseSpec,
    unit: bool,
) -> Result<AdvSample> {
    let batch = x.reshaped(vec![1, x.numel()])?;
    let mut v = sample_dual_flow_batch(model, store, &batch, &[target], sched, eps, noise, unit)?;
    Ok(v.remove(0))
}
