//! Cascading distribution-shift training.
//!
//! Per batch the forward flow (or a marginal noising, depending on variant)
//! produces the start state; the reverse loop then walks t = N..1 and at each
//! timestep predicts x0 by extrapolation, clips it to the budget box around
//! the original, backprops the targeted cross-entropy into the adapters, and
//! steps the optimizer before moving to the earlier timestep. The state
//! entering each step is a tape constant: the update order of the loop means
//! it was produced by an older adapter state, so gradients do not flow
//! through the trajectory.

use super::sample::sample_dual_flow_batch;
use super::{mask::random_square_mask, AttackConfig, AttackVariant, MaskConfig};
use crate::error::{CoreError, Result};
use crate::flow::{forward_integrate, marginal_sample, NoiseSpec};
use crate::nn::{BatchCond, Classifier, VelocityModel};
use crate::rng::Rng;
use crate::tensor::{Binding, Optimizer, ParamStore, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// (optimizer step, batch loss)
    pub loss_curve: Vec<(u64, f32)>,
    /// (optimizer step, white-box targeted ASR probe)
    pub asr_curve: Vec<(u64, f32)>,
    pub optimizer_steps: u64,
    pub batches_processed: usize,
}

/// Multi-target training: targets drawn uniformly from `cfg.targets` per
/// sample. Only adapter parameters (and class-embedding rows when configured)
/// receive updates; everything else is frozen on entry.
pub fn train_dual_flow(
    model: &VelocityModel,
    vstore: &mut ParamStore,
    clf: &Classifier,
    cstore: &ParamStore,
    inputs: &Tensor,
    cfg: &AttackConfig,
) -> Result<TrainOutcome> {
    run_cascade(model, vstore, clf, cstore, inputs, cfg, None, None)
}

/// Single-target fine-tuning: fixed target class, and a fresh random square
/// mask per step pins the masked pixels to the original image before the
/// clip, spreading the adversarial pattern across the whole frame.
#[allow(clippy::too_many_arguments)]
pub fn finetune_single_target(
    model: &VelocityModel,
    vstore: &mut ParamStore,
    clf: &Classifier,
    cstore: &ParamStore,
    inputs: &Tensor,
    fixed_target: usize,
    cfg: &AttackConfig,
    mcfg: &MaskConfig,
) -> Result<TrainOutcome> {
    run_cascade(model, vstore, clf, cstore, inputs, cfg, Some(fixed_target), Some(mcfg))
}

#[allow(clippy::too_many_arguments)]
fn run_cascade(
    model: &VelocityModel,
    vstore: &mut ParamStore,
    clf: &Classifier,
    cstore: &ParamStore,
    inputs: &Tensor,
    cfg: &AttackConfig,
    fixed_target: Option<usize>,
    mask_cfg: Option<&MaskConfig>,
) -> Result<TrainOutcome> {
    cfg.validate(model.cfg.num_classes)?;
    if !model.has_adapters() {
        return Err(CoreError::InvalidArgument(
            "attack training needs attached adapters".into(),
        ));
    }
    if inputs.shape().len() != 2 || inputs.shape()[1] != model.cfg.input_dim {
        return Err(CoreError::Shape(format!(
            "training inputs {:?} for input_dim {}",
            inputs.shape(),
            model.cfg.input_dim
        )));
    }
    if clf.cfg.input_dim != model.cfg.input_dim {
        return Err(CoreError::Shape(format!(
            "classifier input {} vs model input {}",
            clf.cfg.input_dim, model.cfg.input_dim
        )));
    }
    if let Some(c) = fixed_target {
        if c >= model.cfg.num_classes {
            return Err(CoreError::InvalidArgument(format!("fixed target {c} out of range")));
        }
    }
    let side = (model.cfg.input_dim as f64).sqrt() as usize;
    if mask_cfg.is_some() && side * side != model.cfg.input_dim {
        return Err(CoreError::InvalidArgument(
            "masked fine-tuning needs square image inputs".into(),
        ));
    }

    // gradient isolation: adapters (and optionally class rows) train, nothing else
    let trainable = model.attack_trainable_names(cfg.train_class_rows);
    vstore.freeze_all();
    for name in &trainable {
        vstore.set_trainable(name, true)?;
    }

    let n = inputs.shape()[0];
    let d = model.cfg.input_dim;
    let delta = cfg.sched.delta();
    let root = Rng::seed_from(cfg.seed);
    let mut shuffle_rng = root.fork(1);
    let mut target_rng = root.fork(2);
    let mut z_rng = root.fork(3);
    let mut sde_rng = root.fork(4);
    let mut mask_rng = mask_cfg.map(|m| Rng::seed_from(m.seed));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);

    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // forces an initial shuffle
    let mut outcome = TrainOutcome {
        loss_curve: Vec::new(),
        asr_curve: Vec::new(),
        optimizer_steps: 0,
        batches_processed: 0,
    };

    let probe = |vstore: &ParamStore, step: u64, out: &mut TrainOutcome| -> Result<()> {
        let asr = probe_whitebox_asr(model, vstore, clf, cstore, inputs, cfg, fixed_target)?;
        out.asr_curve.push((step, asr));
        Ok(())
    };
    probe(vstore, 0, &mut outcome)?;

    'outer: while outcome.optimizer_steps < cfg.steps as u64 {
        // next batch of sample indices
        let mut batch_idx = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(n) {
            if cursor >= n {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let bsz = batch_idx.len();
        let mut x0_data = Vec::with_capacity(bsz * d);
        for &i in &batch_idx {
            x0_data.extend_from_slice(&inputs.data()[i * d..(i + 1) * d]);
        }
        let x0 = Tensor::new(vec![bsz, d], x0_data)?;
        let targets: Vec<usize> = match fixed_target {
            Some(c) => vec![c; bsz],
            None => (0..bsz).map(|_| cfg.targets[target_rng.below(cfg.targets.len())]).collect(),
        };

        match cfg.variant {
            AttackVariant::CascadeOde | AttackVariant::CascadeSde => {
                // start state: real forward trajectory (co) or direct noising (cs)
                let (mut x, fwd_traj) = match cfg.variant {
                    AttackVariant::CascadeOde => {
                        let (x_tau, traj) = forward_integrate(
                            |xs, t| model.eval(vstore, xs, t, BatchCond::Null, false),
                            &x0,
                            &cfg.sched,
                        )?;
                        (x_tau, Some(traj))
                    }
                    _ => {
                        let z = Tensor::new(vec![bsz, d], z_rng.normal_vec(bsz * d, 1.0))?;
                        (marginal_sample(&x0, cfg.sched.tau(), &z)?, None)
                    }
                };
                for t_idx in (1..=cfg.sched.steps()).rev() {
                    if outcome.optimizer_steps >= cfg.steps as u64 {
                        break 'outer;
                    }
                    let t_time = cfg.sched.time(t_idx);
                    let mask = match (mask_cfg, mask_rng.as_mut()) {
                        (Some(mc), Some(rng)) => Some(random_square_mask(side, side, mc, rng)?),
                        _ => None,
                    };
                    let l2_ref = if cfg.l2_weight > 0.0 {
                        fwd_traj
                            .as_ref()
                            .and_then(|tr| tr.state_at(cfg.sched.time(t_idx - 1)))
                            .cloned()
                    } else {
                        None
                    };
                    let (loss, v_val) = cascade_step(
                        model, vstore, clf, cstore, &mut opt, &x, &x0, &targets, t_time, delta,
                        cfg, mask.as_ref(), l2_ref.as_ref(),
                    )?;
                    outcome.optimizer_steps += 1;
                    outcome.loss_curve.push((outcome.optimizer_steps, loss as f32));

                    // state for the next (earlier) timestep, pre-update velocity
                    let mut next: Vec<f32> = x
                        .data()
                        .iter()
                        .zip(v_val.data())
                        .map(|(&xi, &vi)| (xi as f64 - vi as f64 * delta as f64) as f32)
                        .collect();
                    if cfg.variant == AttackVariant::CascadeSde && cfg.noise.gamma > 0.0 {
                        let scale =
                            cfg.noise.gamma as f64 * t_time as f64 * (delta as f64).sqrt();
                        for v in next.iter_mut() {
                            *v = (*v as f64 + scale * sde_rng.normal_f64()) as f32;
                        }
                    }
                    x = Tensor::new(vec![bsz, d], next)?;

                    if cfg.eval_every > 0 && outcome.optimizer_steps % cfg.eval_every as u64 == 0 {
                        probe(vstore, outcome.optimizer_steps, &mut outcome)?;
                    }
                }
            }
            AttackVariant::RandomSde => {
                // single update at a random grid time in {delta, ..., tau}
                let t_idx = 1 + z_rng.below(cfg.sched.steps());
                let t_time = cfg.sched.time(t_idx);
                let z = Tensor::new(vec![bsz, d], z_rng.normal_vec(bsz * d, 1.0))?;
                let x_t = marginal_sample(&x0, t_time, &z)?;
                let (loss, _) = cascade_step(
                    model, vstore, clf, cstore, &mut opt, &x_t, &x0, &targets, t_time, delta,
                    cfg, None, None,
                )?;
                outcome.optimizer_steps += 1;
                outcome.loss_curve.push((outcome.optimizer_steps, loss as f32));
                if cfg.eval_every > 0 && outcome.optimizer_steps % cfg.eval_every as u64 == 0 {
                    probe(vstore, outcome.optimizer_steps, &mut outcome)?;
                }
            }
        }
        outcome.batches_processed += 1;
    }

    probe(vstore, outcome.optimizer_steps, &mut outcome)?;
    Ok(outcome)
}

/// One per-timestep update: extrapolate x0, (mask,) clip, classify, backprop
/// into the adapters, step. Returns the batch loss and the velocity value
/// computed before the update (the Euler step to the next state uses it).
#[allow(clippy::too_many_arguments)]
fn cascade_step(
    model: &VelocityModel,
    vstore: &mut ParamStore,
    clf: &Classifier,
    cstore: &ParamStore,
    opt: &mut Optimizer,
    x_t: &Tensor,
    x0: &Tensor,
    targets: &[usize],
    t_time: f32,
    delta: f32,
    cfg: &AttackConfig,
    mask: Option<&Tensor>,
    l2_ref: Option<&Tensor>,
) -> Result<(f64, Tensor)> {
    let mut step = || -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let mut bind_v = Binding::new();
        let mut bind_c = Binding::new();
        let xt_c = tape.constant(x_t);
        let v = model.forward(
            &mut tape,
            &mut bind_v,
            vstore,
            xt_c,
            t_time,
            BatchCond::Classes(targets),
            true,
        )?;
        let v_val = tape.value(v);

        // x0 prediction by straight-line extrapolation
        let scaled = tape.scale(v, t_time as f64)?;
        let mut xhat = tape.sub(xt_c, scaled)?;

        if let Some(m) = mask {
            // xhat = x0 + M * (xhat - x0)
            let bsz = x_t.shape()[0];
            let rows: Vec<Tensor> = (0..bsz).map(|_| m.clone()).collect();
            let m_b = Tensor::stack_rows(&rows)?;
            let x0_c = tape.constant(x0);
            let m_c = tape.constant(&m_b);
            let diff = tape.sub(xhat, x0_c)?;
            let masked = tape.mul(diff, m_c)?;
            xhat = tape.add(x0_c, masked)?;
        }

        if cfg.train_clip {
            let lo = Tensor::new(
                x0.shape().to_vec(),
                x0.data().iter().map(|&v| v - cfg.epsilon).collect(),
            )?;
            let hi = Tensor::new(
                x0.shape().to_vec(),
                x0.data().iter().map(|&v| v + cfg.epsilon).collect(),
            )?;
            let lo_c = tape.constant(&lo);
            let hi_c = tape.constant(&hi);
            xhat = tape.clip_box(xhat, lo_c, hi_c)?;
        }

        let logits = clf.forward(&mut tape, &mut bind_c, cstore, xhat)?;
        let mut loss = tape.softmax_cross_entropy(logits, targets)?;

        if cfg.l2_weight > 0.0 {
            if let Some(ref_state) = l2_ref {
                let vstep = tape.scale(v, delta as f64)?;
                let x_next = tape.sub(xt_c, vstep)?;
                let ref_c = tape.constant(ref_state);
                let d2 = tape.sub(x_next, ref_c)?;
                let pen = tape.mean_sqnorm_rows(d2)?;
                let weighted = tape.scale(pen, cfg.l2_weight as f64)?;
                loss = tape.add(loss, weighted)?;
            }
        }

        let loss_val = tape.scalar(loss)?;
        let grads = tape.backward(loss)?;
        let gmap = bind_v.grad_map(&tape, vstore, &grads);
        opt.step(vstore, &gmap)?;
        Ok((loss_val, v_val))
    };
    match step() {
        Err(CoreError::NonFinite(what)) => Err(CoreError::NonFinite(format!(
            "attack training loss ({what})"
        ))),
        other => other,
    }
}

/// White-box targeted ASR over a fixed probe subset: every probe input is
/// attacked once per target class (mean over classes), so the number cannot
/// be confounded by any correlation between data order and true labels.
fn probe_whitebox_asr(
    model: &VelocityModel,
    vstore: &ParamStore,
    clf: &Classifier,
    cstore: &ParamStore,
    inputs: &Tensor,
    cfg: &AttackConfig,
    fixed_target: Option<usize>,
) -> Result<f32> {
    let d = model.cfg.input_dim;
    let n = inputs.shape()[0].min(16);
    let mut data = Vec::with_capacity(n * d);
    data.extend_from_slice(&inputs.data()[..n * d]);
    let x = Tensor::new(vec![n, d], data)?;
    let noise = if cfg.noise.gamma > 0.0 {
        NoiseSpec { gamma: cfg.noise.gamma, seed: cfg.noise.seed }
    } else {
        NoiseSpec::deterministic()
    };
    let probe_targets: Vec<usize> = match fixed_target {
        Some(c) => vec![c],
        None => cfg.targets.clone(),
    };
    let mut hits = 0usize;
    let mut total = 0usize;
    for &c in &probe_targets {
        let targets = vec![c; n];
        let samples = sample_dual_flow_batch(
            model,
            vstore,
            &x,
            &targets,
            &cfg.sched,
            cfg.epsilon,
            &noise,
            cfg.unit_domain,
        )?;
        let clipped =
            Tensor::stack_rows(&samples.iter().map(|s| s.clipped.clone()).collect::<Vec<_>>())?;
        let preds = clf.predict(cstore, &clipped)?;
        hits += preds.iter().filter(|&&p| p == c).count();
        total += n;
    }
    Ok(hits as f32 / total.max(1) as f32)
}
