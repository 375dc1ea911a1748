//! Empirical check of the per-timestep improvement property: an adapter
//! update taken at timestep t should not increase the target cross-entropy of
//! the x0 prediction at t - delta, for small steps and smooth networks.
//!
//! Both branches share the same x_{t-delta}, produced with the pre-update
//! parameters, and no clipping is applied anywhere here: the claim concerns
//! the raw extrapolation.

use crate::error::{CoreError, Result};
use crate::flow::{forward_integrate, FlowSchedule};
use crate::nn::{BatchCond, Classifier, VelocityModel};
use crate::tensor::{Binding, Optimizer, OptimizerKind, ParamStore, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct CascadeCheckConfig {
    pub samples: usize,
    /// timestep index of the update; the comparison happens at index - 1.
    /// Needs 2 <= t_index <= N so that both t and t - delta are positive.
    pub t_index: usize,
    pub sched: FlowSchedule,
    pub lr: f32,
    /// slack when comparing the two cross-entropies
    pub tol: f64,
    /// reject non-smooth activations anywhere in the stack
    pub require_smooth: bool,
}

impl CascadeCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(CoreError::InvalidArgument("need at least one sample".into()));
        }
        if self.t_index < 2 || self.t_index > self.sched.steps() {
            return Err(CoreError::InvalidArgument(format!(
                "t_index {} outside 2..={} (both t and t - delta must be positive)",
                self.t_index,
                self.sched.steps()
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(CoreError::InvalidArgument(format!("bad learning rate {}", self.lr)));
        }
        if self.tol < 0.0 {
            return Err(CoreError::InvalidArgument("tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CascadeReport {
    /// fraction of samples with CE_updated <= CE_old + tol at t - delta
    pub improvement_fraction: f64,
    /// mean (CE_updated - CE_old); negative means the update helped
    pub mean_ce_delta: f64,
    pub samples: usize,
}

/// Run the two-branch comparison over `cfg.samples` rows of `inputs`, with
/// targets assigned round-robin from `targets`.
pub fn verify_cascade(
    model: &VelocityModel,
    vstore: &ParamStore,
    clf: &Classifier,
    cstore: &ParamStore,
    inputs: &Tensor,
    targets: &[usize],
    cfg: &CascadeCheckConfig,
) -> Result<CascadeReport> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(CoreError::InvalidArgument("empty target set".into()));
    }
    if cfg.require_smooth && !clf.is_smooth() {
        return Err(CoreError::InvalidArgument(
            "smoothness mode: classifier uses a non-smooth activation".into(),
        ));
    }
    if cfg.require_smooth && !model.cfg.activation.is_smooth() {
        return Err(CoreError::InvalidArgument(
            "smoothness mode: velocity field uses a non-smooth activation".into(),
        ));
    }
    if !model.has_adapters() {
        return Err(CoreError::InvalidArgument("cascade check needs attached adapters".into()));
    }
    if inputs.shape().len() != 2 || inputs.shape()[1] != model.cfg.input_dim {
        return Err(CoreError::Shape(format!(
            "inputs {:?} for input_dim {}",
            inputs.shape(),
            model.cfg.input_dim
        )));
    }
    let n_avail = inputs.shape()[0];
    if cfg.samples > n_avail {
        return Err(CoreError::InvalidArgument(format!(
            "{} samples requested, {} available",
            cfg.samples, n_avail
        )));
    }

    // work on a clone with the attack-trainable set enabled; the caller's
    // store is never mutated
    let mut theta_old = vstore.clone();
    theta_old.freeze_all();
    for name in model.attack_trainable_names(true) {
        theta_old.set_trainable(&name, true)?;
    }

    let t_time = cfg.sched.time(cfg.t_index);
    let t_prev = cfg.sched.time(cfg.t_index - 1);
    let delta = cfg.sched.delta();

    let mut improved = 0usize;
    let mut ce_delta_sum = 0.0f64;

    for i in 0..cfg.samples {
        let c = targets[i % targets.len()];
        let x0 = inputs.row(i)?.reshaped(vec![1, model.cfg.input_dim])?;

        // forward to tau with the frozen base field
        let (x_tau, _) = forward_integrate(
            |xs, t| model.eval(&theta_old, xs, t, BatchCond::Null, false),
            &x0,
            &cfg.sched,
        )?;
        // reverse with the current adapters down to t
        let mut x_t = x_tau;
        for idx in (cfg.t_index + 1..=cfg.sched.steps()).rev() {
            let ti = cfg.sched.time(idx);
            let v = model.eval(&theta_old, &x_t, ti, BatchCond::Classes(&[c]), true)?;
            let stepped: Vec<f32> = x_t
                .data()
                .iter()
                .zip(v.data())
                .map(|(&x, &vv)| (x as f64 - vv as f64 * delta as f64) as f32)
                .collect();
            x_t = Tensor::new(x_t.shape().to_vec(), stepped)?;
        }

        // update branch: gradient of CE(f(x0_hat), c) at timestep t, no clip
        let mut theta_new = theta_old.clone();
        let v_at_t = {
            let mut tape = Tape::new();
            let mut bind_v = Binding::new();
            let mut bind_c = Binding::new();
            let xt_c = tape.constant(&x_t);
            let v = model.forward(
                &mut tape,
                &mut bind_v,
                &theta_old,
                xt_c,
                t_time,
                BatchCond::Classes(&[c]),
                true,
            )?;
            let v_val = tape.value(v);
            let scaled = tape.scale(v, t_time as f64)?;
            let xhat0 = tape.sub(xt_c, scaled)?;
            let logits = clf.forward(&mut tape, &mut bind_c, cstore, xhat0)?;
            let loss = tape.softmax_cross_entropy(logits, &[c])?;
            let grads = tape.backward(loss)?;
            let gmap = bind_v.grad_map(&tape, &theta_old, &grads);
            let mut opt = Optimizer::new(OptimizerKind::Sgd, cfg.lr);
            opt.step(&mut theta_new, &gmap)?;
            v_val
        };

        // shared next state from the pre-update parameters
        let x_prev: Vec<f32> = x_t
            .data()
            .iter()
            .zip(v_at_t.data())
            .map(|(&x, &vv)| (x as f64 - vv as f64 * delta as f64) as f32)
            .collect();
        let x_prev = Tensor::new(x_t.shape().to_vec(), x_prev)?;

        let ce_at_prev = |store: &ParamStore| -> Result<f64> {
            let v = model.eval(store, &x_prev, t_prev, BatchCond::Classes(&[c]), true)?;
            let xhat: Vec<f32> = x_prev
                .data()
                .iter()
                .zip(v.data())
                .map(|(&x, &vv)| (x as f64 - vv as f64 * t_prev as f64) as f32)
                .collect();
            let xhat = Tensor::new(x_prev.shape().to_vec(), xhat)?;
            let logits = clf.eval(cstore, &xhat)?;
            let mut tape = Tape::new();
            let lv = tape.constant(&logits);
            let loss = tape.softmax_cross_entropy(lv, &[c])?;
            tape.scalar(loss)
        };
        let ce_old = ce_at_prev(&theta_old)?;
        let ce_new = ce_at_prev(&theta_new)?;
        if ce_new <= ce_old + cfg.tol {
            improved += 1;
        }
        ce_delta_sum += ce_new - ce_old;
    }

    Ok(CascadeReport {
        improvement_fraction: improved as f64 / cfg.samples as f64,
        mean_ce_delta: ce_delta_sum / cfg.samples as f64,
        samples: cfg.samples,
    })
}
