//! Flow-matching pretraining of the unconditional velocity field.
//!
//! For t ~ U(0,1) and z ~ N(0,I), regress v(x_t, t, null) onto (z - x0) along
//! the linear marginal x_t = (1-t) x0 + t z. Times cover all of [0,1] even
//! though attacks only integrate [0, tau]; the field has to be a valid flow
//! globally.

use crate::error::{CoreError, Result};
use crate::flow::marginal_sample;
use crate::nn::{BatchCond, VelocityModel};
use crate::rng::Rng;
use crate::tensor::{Binding, Optimizer, ParamStore, Tape, Tensor};

use super::TrainConfig;

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// mean flow-matching loss per epoch
    pub loss_curve: Vec<f32>,
}

/// Train the base field on `inputs` ([n, d] rows) and freeze it afterward.
/// On divergence the store is rolled back to the last epoch boundary.
pub fn pretrain_flow_matching(
    model: &VelocityModel,
    store: &mut ParamStore,
    inputs: &Tensor,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if inputs.shape().len() != 2 || inputs.shape()[1] != model.cfg.input_dim {
        return Err(CoreError::Shape(format!(
            "pretrain inputs {:?} for input_dim {}",
            inputs.shape(),
            model.cfg.input_dim
        )));
    }
    let n = inputs.shape()[0];
    let d = model.cfg.input_dim;
    let root = Rng::seed_from(cfg.seed);
    let mut shuffle_rng = root.fork(1);
    let mut draw_rng = root.fork(2);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut snapshot = store.clone();
    let mut global_step = 0usize;

    for _epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut idx);
        let mut epoch_loss = 0.0f64;
        let mut epoch_batches = 0usize;
        for chunk in idx.chunks(cfg.batch_size) {
            let bsz = chunk.len();
            let mut x0 = Vec::with_capacity(bsz * d);
            for &i in chunk {
                x0.extend_from_slice(&inputs.data()[i * d..(i + 1) * d]);
            }
            let x0 = Tensor::new(vec![bsz, d], x0)?;
            let times: Vec<f32> = (0..bsz).map(|_| draw_rng.uniform_f32()).collect();
            let z = Tensor::new(vec![bsz, d], draw_rng.normal_vec(bsz * d, 1.0))?;
            // x_t rows at per-sample times
            let mut xt_rows = Vec::with_capacity(bsz);
            let mut target_rows = Vec::with_capacity(bsz);
            for (r, &t) in times.iter().enumerate() {
                let x0r = x0.row(r)?;
                let zr = z.row(r)?;
                xt_rows.push(marginal_sample(&x0r, t, &zr)?);
                let tr: Vec<f32> = zr
                    .data()
                    .iter()
                    .zip(x0r.data())
                    .map(|(&zv, &xv)| zv - xv)
                    .collect();
                target_rows.push(Tensor::new(vec![d], tr)?);
            }
            let xt = Tensor::stack_rows(&xt_rows)?;
            let target = Tensor::stack_rows(&target_rows)?;

            let mut step = || -> Result<f64> {
                let mut tape = Tape::new();
                let mut bind = Binding::new();
                let xv = tape.constant(&xt);
                let v = model.forward_per_sample_t(
                    &mut tape,
                    &mut bind,
                    store,
                    xv,
                    &times,
                    BatchCond::Null,
                    false,
                )?;
                let tv = tape.constant(&target);
                let diff = tape.sub(v, tv)?;
                let loss = tape.mean_sqnorm_rows(diff)?;
                let loss_val = tape.scalar(loss)?;
                let grads = tape.backward(loss)?;
                let gmap = bind.grad_map(&tape, store, &grads);
                opt.step(store, &gmap)?;
                Ok(loss_val)
            };
            match step() {
                Ok(loss_val) => {
                    epoch_loss += loss_val;
                    epoch_batches += 1;
                    global_step += 1;
                }
                Err(CoreError::NonFinite(_)) => {
                    *store = snapshot;
                    return Err(CoreError::Diverged { step: global_step });
                }
                Err(e) => return Err(e),
            }
        }
        curve.push((epoch_loss / epoch_batches.max(1) as f64) as f32);
        snapshot = store.clone();
    }

    // base field is frozen from here on; adapters are attached later
    store.freeze_all();
    Ok(PretrainOutcome { loss_curve: curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VelocityModelCfg;
    use crate::tensor::OptimizerKind;

    fn tiny_model(rng: &mut Rng) -> (VelocityModel, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = VelocityModelCfg {
            input_dim: 2,
            width: 32,
            blocks: 2,
            d_t: 8,
            d_e: 8,
            d_attn: 32,
            num_classes: 4,
            activation: crate::nn::Act::Silu,
        };
        let model = VelocityModel::init(&mut store, cfg, rng).unwrap();
        (model, store)
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut rng = Rng::seed_from(41);
        let (model, mut store) = tiny_model(&mut rng);
        let before = store.clone();
        let inputs = Tensor::new(vec![8, 2], rng.normal_vec(16, 1.0)).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = pretrain_flow_matching(&model, &mut store, &inputs, &cfg).unwrap();
        assert!(out.loss_curve.is_empty());
        for name in before.names() {
            assert_eq!(before.get(name).unwrap(), store.get(name).unwrap());
        }
    }

    #[test]
    fn loss_decreases_and_store_freezes() {
        let mut rng = Rng::seed_from(42);
        let (model, mut store) = tiny_model(&mut rng);
        let inputs = Tensor::new(vec![64, 2], rng.normal_vec(128, 0.5)).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 16,
            lr: 3e-3,
            optimizer: OptimizerKind::Adam,
            seed: 7,
            eval_split: 0.2,
        };
        let out = pretrain_flow_matching(&model, &mut store, &inputs, &cfg).unwrap();
        assert!(out.loss_curve.last().unwrap() < out.loss_curve.first().unwrap());
        assert!(store.trainable_names().is_empty());
    }

    #[test]
    fn zero_output_network_loss_matches_monte_carlo_constant() {
        // with the output projection zeroed, the prediction is 0 and the loss
        // is E||z - x0||^2; estimate that constant with an independent stream
        let mut rng = Rng::seed_from(43);
        let (model, mut store) = tiny_model(&mut rng);
        store.set("vel.out.w", Tensor::zeros(vec![2, 32])).unwrap();
        store.set("vel.out.b", Tensor::zeros(vec![2])).unwrap();
        let inputs = Tensor::new(vec![256, 2], rng.normal_vec(512, 0.5)).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 256,
            lr: 0.0,
            optimizer: OptimizerKind::Sgd,
            seed: 11,
            eval_split: 0.2,
        };
        let out = pretrain_flow_matching(&model, &mut store, &inputs, &cfg).unwrap();
        let measured = out.loss_curve[0] as f64;

        // independent Monte-Carlo oracle: E||z - x0||^2 = dim + mean||x0||^2
        // for centered unit z independent of the data
        let mut mc = Rng::seed_from(999);
        let mut est = 0.0f64;
        let trials = 20_000;
        for _ in 0..trials {
            let i = mc.below(256);
            let x = &inputs.data()[i * 2..(i + 1) * 2];
            let z0 = mc.normal_f64();
            let z1 = mc.normal_f64();
            est += (z0 - x[0] as f64).powi(2) + (z1 - x[1] as f64).powi(2);
        }
        est /= trials as f64;
        assert!(
            (measured - est).abs() / est < 0.1,
            "measured {measured}, oracle {est}"
        );
    }
}
