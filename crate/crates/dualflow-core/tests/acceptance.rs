//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `--nocapture` to see them). Heavy artifacts (pretrained flow,
//! classifiers, trained attack variants) are built once and shared.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use dualflow_core::attack::{
    sample_dual_flow_batch, train_dual_flow, AdvSample, AttackConfig, AttackVariant,
};
use dualflow_core::data::{
    generate_gmm2d, generate_shapes, pretrain_flow_matching, train_classifier, write_dataset_cache,
    DatasetHeader, LabeledData, TrainConfig,
};
use dualflow_core::eval::{
    compute_asr, perturbation_asr, split_asrs, split_confidence_interval, transfer_matrix, Victim,
};
use dualflow_core::flow::{roundtrip_error, FlowSchedule, NoiseSpec};
use dualflow_core::io::{
    checkpoint_from_bytes, checkpoint_to_bytes, emit_visualization, fmt_f32, save_checkpoint,
    CheckpointMeta, MetricsCsv,
};
use dualflow_core::nn::{
    Act, BatchCond, Classifier, ClassifierCfg, VelocityModel, VelocityModelCfg,
};
use dualflow_core::rng::Rng;
use dualflow_core::tensor::{
    central_diff_max_rel_err_scaled, grad_check_tape, Binding, OptimizerKind, ParamStore, Tape,
};
use dualflow_core::theory::{
    verify_cascade, verify_morse_flow, CascadeCheckConfig, MorseProblem,
};
use dualflow_core::Tensor;

// pinned once for the whole suite
const EPS_PAPER: f32 = 16.0 / 255.0; // soundness budget
const EPS_DESK: f32 = 48.0 / 255.0; // training/efficacy budget (see README)
const ATTACK_STEPS: usize = 8000;
const ATTACK_LR: f32 = 2e-3;

fn sched_default() -> FlowSchedule {
    FlowSchedule::new(0.25, 6).unwrap()
}

fn check(criterion: &str, ok: bool, details: &str) {
    println!("acceptance {criterion}: {} ({details})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance {criterion} failed: {details}");
}

// ── shared fixtures ─────────────────────────────────────────────────────

struct ClsRig {
    clf: Classifier,
    store: ParamStore,
    accuracy: f32,
}

struct ShapesBase {
    train: LabeledData,
    holdout: LabeledData,
    flow_model: VelocityModel,
    flow_store: ParamStore,
    src: ClsRig,
    victim_mlp: ClsRig,
    victim_conv: ClsRig,
}

fn shapes_base() -> &'static ShapesBase {
    static CELL: OnceLock<ShapesBase> = OnceLock::new();
    CELL.get_or_init(|| {
        let train = generate_shapes(1, 1600).expect("shapes corpus");
        let holdout = generate_shapes(11, 256).expect("holdout corpus");
        let mut rng = Rng::seed_from(1);
        let mut flow_store = ParamStore::new();
        let flow_model = VelocityModel::init(
            &mut flow_store,
            VelocityModelCfg::for_images(256, 8),
            &mut rng,
        )
        .expect("velocity init");
        pretrain_flow_matching(
            &flow_model,
            &mut flow_store,
            &train.inputs,
            &TrainConfig {
                epochs: 20,
                batch_size: 16,
                lr: 1e-3,
                optimizer: OptimizerKind::Adam,
                seed: 1,
                eval_split: 0.2,
            },
        )
        .expect("pretraining");

        let cls = |cfg: ClassifierCfg, seed: u64| {
            let out = train_classifier(
                cfg,
                &train,
                &TrainConfig {
                    epochs: 20,
                    batch_size: 32,
                    lr: 2e-3,
                    optimizer: OptimizerKind::Adam,
                    seed,
                    eval_split: 0.2,
                },
            )
            .expect("classifier training");
            ClsRig { clf: out.classifier, store: out.store, accuracy: out.test_accuracy }
        };
        ShapesBase {
            src: cls(ClassifierCfg::small_conv(16, 8), 2),
            victim_mlp: cls(ClassifierCfg::mlp(256, 8), 3),
            victim_conv: cls(ClassifierCfg::small_conv(16, 8), 5),
            train,
            holdout,
            flow_model,
            flow_store,
        }
    })
}

struct TrainedAttack {
    model: VelocityModel,
    store: ParamStore,
}

fn train_attack(variant: AttackVariant, train_clip: bool, gamma: f32, steps: usize) -> TrainedAttack {
    let base = shapes_base();
    let mut model = base.flow_model.clone();
    let mut store = base.flow_store.clone();
    let mut arng = Rng::seed_from(3).fork(0x6C6F_7261);
    model.attach_adapters(&mut store, 4, 4.0, &mut arng).expect("adapters");
    let mut cfg = AttackConfig::new(EPS_DESK, sched_default(), (0..8).collect());
    cfg.steps = steps;
    cfg.lr = ATTACK_LR;
    cfg.optimizer = OptimizerKind::Adam;
    cfg.unit_domain = true;
    cfg.seed = 3;
    cfg.variant = variant;
    cfg.train_clip = train_clip;
    if gamma > 0.0 {
        cfg.noise = NoiseSpec::stochastic(gamma, 99).expect("noise");
    }
    train_dual_flow(&model, &mut store, &base.src.clf, &base.src.store, &base.train.inputs, &cfg)
        .expect("attack training");
    TrainedAttack { model, store }
}

fn co_attack() -> &'static TrainedAttack {
    static CELL: OnceLock<TrainedAttack> = OnceLock::new();
    CELL.get_or_init(|| train_attack(AttackVariant::CascadeOde, true, 0.0, ATTACK_STEPS))
}

fn rs_attack() -> &'static TrainedAttack {
    static CELL: OnceLock<TrainedAttack> = OnceLock::new();
    CELL.get_or_init(|| train_attack(AttackVariant::RandomSde, true, 0.0, ATTACK_STEPS))
}

fn cs_attack() -> &'static TrainedAttack {
    // short run: the stochastic-cascade variant participates in the soundness
    // criterion, not the efficacy gates
    static CELL: OnceLock<TrainedAttack> = OnceLock::new();
    CELL.get_or_init(|| train_attack(AttackVariant::CascadeSde, true, 0.5, 1500))
}

fn noclip_attack() -> &'static TrainedAttack {
    static CELL: OnceLock<TrainedAttack> = OnceLock::new();
    CELL.get_or_init(|| train_attack(AttackVariant::CascadeOde, false, 0.0, ATTACK_STEPS))
}

struct GmmBase {
    data: LabeledData,
    flow_model: VelocityModel,
    flow_store: ParamStore,
    smooth: ClsRig,
}

fn gmm_base() -> &'static GmmBase {
    static CELL: OnceLock<GmmBase> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = generate_gmm2d(7, 400, 8).expect("gmm corpus");
        let mut rng = Rng::seed_from(7);
        let mut flow_store = ParamStore::new();
        let flow_model =
            VelocityModel::init(&mut flow_store, VelocityModelCfg::for_points(8), &mut rng)
                .expect("velocity init");
        pretrain_flow_matching(
            &flow_model,
            &mut flow_store,
            &data.inputs,
            &TrainConfig {
                epochs: 20,
                batch_size: 16,
                lr: 1e-3,
                optimizer: OptimizerKind::Adam,
                seed: 7,
                eval_split: 0.2,
            },
        )
        .expect("pretraining");
        let out = train_classifier(
            ClassifierCfg::mlp(2, 8).smooth(),
            &data,
            &TrainConfig {
                epochs: 16,
                batch_size: 16,
                lr: 2e-3,
                optimizer: OptimizerKind::Adam,
                seed: 8,
                eval_split: 0.2,
            },
        )
        .expect("classifier training");
        GmmBase {
            data,
            flow_model,
            flow_store,
            smooth: ClsRig { clf: out.classifier, store: out.store, accuracy: out.test_accuracy },
        }
    })
}

/// Mean per-class ASR under the evaluation protocol: every input attacked
/// once per target class.
fn eval_asr(
    attack: &TrainedAttack,
    clf: &Classifier,
    cstore: &ParamStore,
    inputs: &Tensor,
    n: usize,
    sched: &FlowSchedule,
    eps: f32,
    noise: &NoiseSpec,
) -> f32 {
    let d = inputs.shape()[1];
    let n = n.min(inputs.shape()[0]);
    let x = Tensor::new(vec![n, d], inputs.data()[..n * d].to_vec()).unwrap();
    let mut hits = 0usize;
    let mut total = 0usize;
    for c in 0..attack.model.cfg.num_classes {
        let targets = vec![c; n];
        let samples = sample_dual_flow_batch(
            &attack.model,
            &attack.store,
            &x,
            &targets,
            sched,
            eps,
            noise,
            true,
        )
        .unwrap();
        let rows: Vec<Tensor> = samples.iter().map(|s| s.clipped.clone()).collect();
        let preds = clf.predict(cstore, &Tensor::stack_rows(&rows).unwrap()).unwrap();
        hits += preds.iter().filter(|&&p| p == c).count();
        total += n;
    }
    hits as f32 / total as f32
}

// ── criterion 1: gradient correctness ───────────────────────────────────

#[test]
fn a01_gradient_correctness() {
    let h = 1e-3f32;
    let tol = 1e-4f64;
    let mut worst = 0.0f64;
    let mut checks = 0usize;

    // primitive suite, several random seeds each
    for seed in 0..10u64 {
        let mut rng = Rng::seed_from(1000 + seed);
        let vec6 = Tensor::new(vec![6], rng.normal_vec(6, 0.8)).unwrap();
        let mat23 = Tensor::new(vec![2, 3], rng.normal_vec(6, 0.8)).unwrap();
        let w43 = Tensor::new(vec![4, 3], rng.normal_vec(12, 0.5)).unwrap();
        let logits = Tensor::new(vec![2, 5], rng.normal_vec(10, 1.0)).unwrap();

        let mut run = |name: &str, err: f64| {
            assert!(err <= tol, "{name} (seed {seed}): rel err {err}");
            worst = worst.max(err);
            checks += 1;
        };

        run("add", grad_check_tape(|t, x| {
            let c = t.constant(&Tensor::new(vec![6], vec![0.3; 6]).unwrap());
            let s = t.add(x, c)?;
            t.sum_all(s)
        }, &vec6, h).unwrap());
        run("sub+mul", grad_check_tape(|t, x| {
            let c = t.constant(&Tensor::new(vec![6], vec![0.7; 6]).unwrap());
            let d = t.sub(x, c)?;
            let p = t.mul(d, x)?;
            t.sum_all(p)
        }, &vec6, h).unwrap());
        run("scale", grad_check_tape(|t, x| {
            let s = t.scale(x, -1.7)?;
            t.mean_sqnorm_rows(s)
        }, &mat23, h).unwrap());
        run("add_row", grad_check_tape(|t, x| {
            let m = t.constant(&Tensor::new(vec![2, 6], vec![0.2; 12]).unwrap());
            let y = t.add_row(m, x)?;
            t.mean_sqnorm_rows(y)
        }, &vec6, h).unwrap());
        run("linear_x", grad_check_tape(|t, x| {
            let w = t.constant(&Tensor::new(vec![4, 3], vec![0.25; 12]).unwrap());
            let y = t.linear(x, w, None)?;
            let y = t.tanh(y)?;
            t.mean_sqnorm_rows(y)
        }, &mat23, h).unwrap());
        run("linear_w", grad_check_tape(|t, w| {
            let x = t.constant(&Tensor::new(vec![2, 3], vec![0.4, -0.2, 0.9, 0.1, 0.5, -0.7]).unwrap());
            let y = t.linear(x, w, None)?;
            let y = t.silu(y)?;
            t.mean_sqnorm_rows(y)
        }, &w43, h).unwrap());
        run("matmul", grad_check_tape(|t, a| {
            let b = t.constant(&Tensor::new(vec![3, 4], vec![0.3; 12]).unwrap());
            let c = t.matmul(a, b)?;
            t.mean_sqnorm_rows(c)
        }, &mat23, h).unwrap());
        run("tanh", grad_check_tape(|t, x| {
            let y = t.tanh(x)?;
            t.sum_all(y)
        }, &vec6, h).unwrap());
        run("silu", grad_check_tape(|t, x| {
            let y = t.silu(x)?;
            t.sum_all(y)
        }, &vec6, h).unwrap());
        // relu gradient away from the kink
        let relu_pt = Tensor::new(
            vec![6],
            vec6.data().iter().map(|&v| v.signum() * (v.abs() + 0.05)).collect(),
        )
        .unwrap();
        run("relu", grad_check_tape(|t, x| {
            let y = t.relu(x)?;
            t.sum_all(y)
        }, &relu_pt, h).unwrap());
        run("softmax_ce", grad_check_tape(|t, x| {
            t.softmax_cross_entropy(x, &[1, 3])
        }, &logits, h).unwrap());
        // clip with every coordinate away from the bounds
        let clip_pt = Tensor::new(vec![6], vec![-0.9, -0.3, 0.0, 0.2, 0.45, 0.9]).unwrap();
        run("clip_box", grad_check_tape(|t, x| {
            let lo = t.constant(&Tensor::new(vec![6], vec![-0.5; 6]).unwrap());
            let hi = t.constant(&Tensor::new(vec![6], vec![0.5; 6]).unwrap());
            let y = t.clip_box(x, lo, hi)?;
            t.sum_all(y)
        }, &clip_pt, h).unwrap());
        run("mean_sqnorm", grad_check_tape(|t, x| t.mean_sqnorm_rows(x), &mat23, h).unwrap());

        // attention w.r.t. each operand
        let (dz, de, dd, r) = (3usize, 4usize, 5usize, 2usize);
        let z = Tensor::new(vec![2, dz], rng.normal_vec(2 * dz, 0.8)).unwrap();
        let e = Tensor::new(vec![2, r, de], rng.normal_vec(2 * r * de, 0.8)).unwrap();
        let wq = Tensor::new(vec![dd, dz], rng.normal_vec(dd * dz, 0.5)).unwrap();
        let wk = Tensor::new(vec![dd, de], rng.normal_vec(dd * de, 0.5)).unwrap();
        let wv = Tensor::new(vec![dd, de], rng.normal_vec(dd * de, 0.5)).unwrap();
        for role in 0..5usize {
            let point = match role {
                0 => z.clone(),
                1 => e.clone(),
                2 => wq.clone(),
                3 => wk.clone(),
                _ => wv.clone(),
            };
            let (z2, e2, wq2, wk2, wv2) = (z.clone(), e.clone(), wq.clone(), wk.clone(), wv.clone());
            run(
                "cross_attention",
                grad_check_tape(
                    move |t, leaf| {
                        let zv = if role == 0 { leaf } else { t.constant(&z2) };
                        let ev = if role == 1 { leaf } else { t.constant(&e2) };
                        let wqv = if role == 2 { leaf } else { t.constant(&wq2) };
                        let wkv = if role == 3 { leaf } else { t.constant(&wk2) };
                        let wvv = if role == 4 { leaf } else { t.constant(&wv2) };
                        let o = t.cross_attention(zv, ev, wqv, wkv, wvv)?;
                        t.mean_sqnorm_rows(o)
                    },
                    &point,
                    h,
                )
                .unwrap(),
            );
        }

        // conv2d w.r.t. input and kernel
        let img = Tensor::new(vec![1, 1, 5, 5], rng.normal_vec(25, 0.6)).unwrap();
        let ker = Tensor::new(vec![2, 1, 3, 3], rng.normal_vec(18, 0.4)).unwrap();
        let (img2, ker2) = (img.clone(), ker.clone());
        run("conv2d_x", grad_check_tape(move |t, x| {
            let w = t.constant(&ker2);
            let b = t.constant(&Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
            let y = t.conv2d(x, w, b, 2)?;
            let y = t.tanh(y)?;
            let flat = t.reshape(y, vec![1, 8])?;
            t.mean_sqnorm_rows(flat)
        }, &img, h).unwrap());
        run("conv2d_w", grad_check_tape(move |t, w| {
            let x = t.constant(&img2);
            let b = t.constant(&Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
            let y = t.conv2d(x, w, b, 2)?;
            let y = t.silu(y)?;
            let flat = t.reshape(y, vec![1, 8])?;
            t.mean_sqnorm_rows(flat)
        }, &ker, h).unwrap());
    }

    // 3-block velocity model: gradient w.r.t. the input and w.r.t. adapter
    // and embedding parameters, against central differences of the full model
    let mut rng = Rng::seed_from(4242);
    let mut store = ParamStore::new();
    let cfg = VelocityModelCfg {
        input_dim: 12,
        width: 16,
        blocks: 3,
        d_t: 8,
        d_e: 8,
        d_attn: 16,
        num_classes: 4,
        activation: Act::Silu,
    };
    let mut model = VelocityModel::init(&mut store, cfg, &mut rng).unwrap();
    store.freeze_all();
    model.attach_adapters(&mut store, 2, 2.0, &mut rng).unwrap();
    store.set_trainable("vel.emb.classes", true).unwrap();
    // make B nonzero so adapter-A gradients are live
    for name in store.trainable_names() {
        if name.ends_with("lora_b") {
            let t = store.get(&name).unwrap().clone();
            let bump =
                Tensor::new(t.shape().to_vec(), rng.normal_vec(t.numel(), 0.05)).unwrap();
            store.set(&name, bump).unwrap();
        }
    }

    // composite-model checks: coordinates whose true gradient sits orders
    // below the tensor scale measure finite-difference truncation, not the
    // backward rule, so the denominator is floored at 1e-3 of the gradient's
    // max magnitude (primitive checks above stay strict)
    let floor_frac = 1e-3f64;
    for seed in 0..6u64 {
        let mut srng = Rng::seed_from(9000 + seed);
        let x = Tensor::new(vec![2, 12], srng.normal_vec(24, 0.8)).unwrap();
        let t_val = 0.1 + 0.8 * srng.uniform_f32();
        let targets = vec![srng.below(4), srng.below(4)];

        // w.r.t. the input
        let input_analytic = {
            let mut tape = Tape::new();
            let mut bind = Binding::new();
            let xv = tape.leaf(&x);
            let v = model
                .forward(&mut tape, &mut bind, &store, xv, t_val, BatchCond::Classes(&targets), true)
                .unwrap();
            let l = tape.mean_sqnorm_rows(v).unwrap();
            let grads = tape.backward(l).unwrap();
            grads.wrt_f64(xv).unwrap().to_vec()
        };
        let err = central_diff_max_rel_err_scaled(
            |p| {
                let mut tape = Tape::new();
                let mut bind = Binding::new();
                let xv = tape.constant(p);
                let v = model.forward(
                    &mut tape,
                    &mut bind,
                    &store,
                    xv,
                    t_val,
                    BatchCond::Classes(&targets),
                    true,
                )?;
                let l = tape.mean_sqnorm_rows(v)?;
                tape.scalar(l)
            },
            &input_analytic,
            &x,
            h,
            floor_frac,
        )
        .unwrap();
        assert!(err <= tol, "model input grad (seed {seed}): {err}");
        worst = worst.max(err);
        checks += 1;

        // w.r.t. a parameter tensor: one adapter A, one adapter B, class rows
        for pname in ["vel.block1.dense.lora_a", "vel.block1.dense.lora_b", "vel.emb.classes"] {
            let loss_with = |s: &ParamStore| -> f64 {
                let mut tape = Tape::new();
                let mut bind = Binding::new();
                let xv = tape.constant(&x);
                let v = model
                    .forward(&mut tape, &mut bind, s, xv, t_val, BatchCond::Classes(&targets), true)
                    .unwrap();
                let l = tape.mean_sqnorm_rows(v).unwrap();
                tape.scalar(l).unwrap()
            };
            let analytic = {
                let mut tape = Tape::new();
                let mut bind = Binding::new();
                let xv = tape.constant(&x);
                let v = model
                    .forward(&mut tape, &mut bind, &store, xv, t_val, BatchCond::Classes(&targets), true)
                    .unwrap();
                let l = tape.mean_sqnorm_rows(v).unwrap();
                let grads = tape.backward(l).unwrap();
                let var = bind.var(pname).expect("bound param");
                grads.wrt_f64(var).expect("grad present").to_vec()
            };
            let point = store.get(pname).unwrap().clone();
            let err = central_diff_max_rel_err_scaled(
                |p| {
                    let mut s = store.clone();
                    s.set(pname, p.clone())?;
                    Ok(loss_with(&s))
                },
                &analytic,
                &point,
                h,
                floor_frac,
            )
            .unwrap();
            assert!(err <= tol, "model param {pname} (seed {seed}): {err}");
            worst = worst.max(err);
            checks += 1;
        }
    }

    check(
        "01 gradient-correctness",
        checks >= 100 && worst <= tol,
        &format!("{checks} checks, max rel err {worst:.3e} <= {tol:.0e}"),
    );
}

// ── criterion 2: l-infinity soundness ───────────────────────────────────

#[test]
fn a02_linf_soundness() {
    let base = shapes_base();
    let sched = sched_default();
    let d = 256usize;
    let take = |count: usize, offset: usize| -> (Tensor, Vec<usize>) {
        // cycle through holdout rows; targets cycle over the classes
        let n_avail = base.holdout.len();
        let mut data = Vec::with_capacity(count * d);
        let mut targets = Vec::with_capacity(count);
        for i in 0..count {
            let row = (offset + i) % n_avail;
            data.extend_from_slice(&base.holdout.inputs.data()[row * d..(row + 1) * d]);
            targets.push((offset + i) % 8);
        }
        (Tensor::new(vec![count, d], data).unwrap(), targets)
    };

    let mut worst = 0.0f32;
    let mut violations = 0usize;
    let mut total = 0usize;
    let runs: [(&TrainedAttack, NoiseSpec, usize); 3] = [
        (co_attack(), NoiseSpec::deterministic(), 334),
        (cs_attack(), NoiseSpec::stochastic(0.5, 41).unwrap(), 333),
        (rs_attack(), NoiseSpec::stochastic(0.5, 42).unwrap(), 333),
    ];
    for (attack, noise, count) in runs {
        let mut done = 0usize;
        while done < count {
            let batch = (count - done).min(64);
            let (x, targets) = take(batch, total + done);
            let samples = sample_dual_flow_batch(
                &attack.model,
                &attack.store,
                &x,
                &targets,
                &sched,
                EPS_PAPER,
                &noise,
                true,
            )
            .unwrap();
            for s in &samples {
                let linf = s.linf();
                worst = worst.max(linf);
                if linf > EPS_PAPER {
                    violations += 1;
                }
                assert!(
                    s.clipped.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
                    "clipped sample left [0,1]"
                );
            }
            done += batch;
        }
        total += count;
    }
    check(
        "02 linf-soundness",
        total == 1000 && violations == 0,
        &format!(
            "{total} samples across co/cs/rs, 0 violations required, got {violations}; worst linf {} <= {}",
            fmt_f32(worst),
            fmt_f32(EPS_PAPER)
        ),
    );
}

// ── criterion 3: zero-LoRA identity ─────────────────────────────────────

#[test]
fn a03_zero_lora_identity() {
    let base = shapes_base();
    let mut model = base.flow_model.clone();
    let mut store = base.flow_store.clone();
    let mut rng = Rng::seed_from(33);
    model.attach_adapters(&mut store, 4, 4.0, &mut rng).unwrap();
    let mut max_diff = 0.0f32;
    for _ in 0..100 {
        let x = Tensor::new(vec![1, 256], (0..256).map(|_| rng.uniform_f32()).collect()).unwrap();
        let t = rng.uniform_f32();
        let c = rng.below(8);
        let with = model.eval(&store, &x, t, BatchCond::Classes(&[c]), true).unwrap();
        let without = model.eval(&store, &x, t, BatchCond::Classes(&[c]), false).unwrap();
        assert_eq!(with, without, "bit-exact equality violated");
        max_diff = max_diff.max(with.linf_dist(&without).unwrap());
    }
    check("03 zero-lora-identity", max_diff == 0.0, "100 random (x,t,c), max |v_theta - v_phi| = 0");
}

// ── criterion 4: Euler reversibility ────────────────────────────────────

#[test]
fn a04_euler_reversibility() {
    let base = shapes_base();
    let idx: Vec<usize> = (0..8).collect();
    let (x, _) = base.holdout.batch(&idx).unwrap();
    let err_at = |n: usize| -> f32 {
        let sched = FlowSchedule::new(0.25, n).unwrap();
        roundtrip_error(
            |xs, t| base.flow_model.eval(&base.flow_store, xs, t, BatchCond::Null, false),
            &x,
            &sched,
        )
        .unwrap()
    };
    let errs: Vec<f32> = [8usize, 16, 32, 64].iter().map(|&n| err_at(n)).collect();
    let mut ok = true;
    let mut detail = String::new();
    for i in 0..3 {
        let ratio = errs[i] / errs[i + 1];
        detail.push_str(&format!("err({})/err({}) = {:.3}; ", 8 << i, 16 << i, ratio));
        ok &= (1.5..=2.5).contains(&ratio);
    }
    check("04 euler-reversibility", ok, detail.trim_end_matches("; "));
}

// ── criterion 5: flow-construction verification ─────────────────────────

#[test]
fn a05_morse_flow_verification() {
    let problems = [
        ("bowl-2d", MorseProblem::bowl(2).unwrap()),
        ("tilted-2d", MorseProblem::tilted_quadratic(2).unwrap()),
        ("two-bumps-2d", MorseProblem::two_bumps().unwrap()),
    ];
    let mut all_ok = true;
    let mut detail = String::new();
    for (name, p) in &problems {
        let r = verify_morse_flow(p, 21, 0.5, 0.5 / 200.0, 1e-9).unwrap();
        let ok = r.monotone_fraction == 1.0
            && r.min_mu > 0.0
            && r.min_endpoint_separation > 0.0
            && r.min_abs_det_jacobian > 0.0;
        all_ok &= ok;
        detail.push_str(&format!(
            "{name}: monotone {} min_mu {:.2e} sep {:.2e} det {:.2e}; ",
            r.monotone_fraction, r.min_mu, r.min_endpoint_separation, r.min_abs_det_jacobian
        ));
    }
    check("05 morse-flow", all_ok, detail.trim_end_matches("; "));
}

// ── criterion 6: cascading improvement ──────────────────────────────────

#[test]
fn a06_cascading_improvement() {
    let gmm = gmm_base();
    assert!(gmm.smooth.accuracy >= 0.95, "smooth classifier accuracy {}", gmm.smooth.accuracy);
    let mut model = gmm.flow_model.clone();
    let mut store = gmm.flow_store.clone();
    let mut rng = Rng::seed_from(61);
    model.attach_adapters(&mut store, 4, 4.0, &mut rng).unwrap();
    let base_cfg = CascadeCheckConfig {
        samples: 200,
        t_index: 32,
        sched: FlowSchedule::new(0.25, 64).unwrap(),
        lr: 1e-4,
        tol: 1e-8,
        require_smooth: true,
    };
    let targets: Vec<usize> = (0..8).collect();
    let report = verify_cascade(
        &model, &store, &gmm.smooth.clf, &gmm.smooth.store, &gmm.data.inputs, &targets, &base_cfg,
    )
    .unwrap();
    let control = verify_cascade(
        &model,
        &store,
        &gmm.smooth.clf,
        &gmm.smooth.store,
        &gmm.data.inputs,
        &targets,
        &CascadeCheckConfig { lr: 0.0, ..base_cfg },
    )
    .unwrap();
    check(
        "06 cascading-improvement",
        report.improvement_fraction >= 0.9
            && report.mean_ce_delta < 0.0
            && control.improvement_fraction == 1.0,
        &format!(
            "lr 1e-4: fraction {} mean dCE {:.3e}; lr 0 control fraction {}",
            report.improvement_fraction, report.mean_ce_delta, control.improvement_fraction
        ),
    );
}

// ── criterion 7: attack efficacy ────────────────────────────────────────

#[test]
fn a07_attack_efficacy() {
    let base = shapes_base();
    // victim-accuracy floor: attacks against broken classifiers are meaningless
    assert!(base.src.accuracy >= 0.9, "source accuracy {}", base.src.accuracy);
    assert!(base.victim_mlp.accuracy >= 0.9, "mlp victim accuracy {}", base.victim_mlp.accuracy);
    assert!(base.victim_conv.accuracy >= 0.9, "conv victim accuracy {}", base.victim_conv.accuracy);

    let attack = co_attack();
    let noise = NoiseSpec::deterministic();
    let n = 32usize;
    let d = 256usize;
    let x = Tensor::new(vec![n, d], base.holdout.inputs.data()[..n * d].to_vec()).unwrap();
    let mut samples: Vec<AdvSample> = Vec::new();
    for c in 0..8usize {
        let targets = vec![c; n];
        samples.extend(
            sample_dual_flow_batch(
                &attack.model,
                &attack.store,
                &x,
                &targets,
                &sched_default(),
                EPS_DESK,
                &noise,
                true,
            )
            .unwrap(),
        );
    }
    let victims = vec![
        Victim { name: "source".into(), classifier: &base.src.clf, store: &base.src.store, is_source: true },
        Victim { name: "mlp".into(), classifier: &base.victim_mlp.clf, store: &base.victim_mlp.store, is_source: false },
        Victim { name: "conv-2".into(), classifier: &base.victim_conv.clf, store: &base.victim_conv.store, is_source: false },
    ];
    let table = transfer_matrix(&victims, &mut samples).unwrap();
    let white = table.entries[0].mean_asr;
    let black_mlp = table.entries[1].mean_asr;
    let black_conv = table.entries[2].mean_asr;
    check(
        "07 attack-efficacy",
        white >= 0.60 && black_mlp >= 0.25,
        &format!(
            "white-box {} >= 0.60; black-box mlp {} >= 0.25 (conv-2 victim {}, black-box mean {})",
            fmt_f32(white),
            fmt_f32(black_mlp),
            fmt_f32(black_conv),
            fmt_f32(table.black_box_average.unwrap_or(f32::NAN)),
        ),
    );
}

// ── criterion 8: variant ordering ───────────────────────────────────────

#[test]
fn a08_variant_ordering() {
    let base = shapes_base();
    let det = NoiseSpec::deterministic();
    let sto = NoiseSpec::stochastic(0.5, 17).unwrap();
    let sched = sched_default();
    let co = co_attack();
    let rs = rs_attack();
    let co_det = eval_asr(co, &base.src.clf, &base.src.store, &base.holdout.inputs, 32, &sched, EPS_DESK, &det);
    let rs_det = eval_asr(rs, &base.src.clf, &base.src.store, &base.holdout.inputs, 32, &sched, EPS_DESK, &det);
    let co_sto = eval_asr(co, &base.src.clf, &base.src.store, &base.holdout.inputs, 32, &sched, EPS_DESK, &sto);
    let rs_sto = eval_asr(rs, &base.src.clf, &base.src.store, &base.holdout.inputs, 32, &sched, EPS_DESK, &sto);
    check(
        "08 variant-ordering",
        co_det > rs_det && co_sto > rs_sto,
        &format!(
            "gamma=0: co {} > rs {}; gamma=0.5: co {} > rs {}",
            fmt_f32(co_det),
            fmt_f32(rs_det),
            fmt_f32(co_sto),
            fmt_f32(rs_sto)
        ),
    );
}

// ── criterion 9: step-sweep trend ───────────────────────────────────────

#[test]
fn a09_step_sweep_trend() {
    let base = shapes_base();
    let det = NoiseSpec::deterministic();
    let tolerance = 0.03f32;
    let sweep = |attack: &TrainedAttack| -> Vec<f32> {
        [1usize, 2, 4, 8]
            .iter()
            .map(|&n| {
                let sched = FlowSchedule::new(0.25, n).unwrap();
                eval_asr(attack, &base.src.clf, &base.src.store, &base.holdout.inputs, 32, &sched, EPS_DESK, &det)
            })
            .collect()
    };
    let co_curve = sweep(co_attack());
    let rs_curve = sweep(rs_attack());

    // co: non-decreasing within the tolerance band
    let co_ok = co_curve.windows(2).all(|w| w[1] >= w[0] - tolerance);
    // rs: beyond its peak the rate never recovers into the peak band again
    let (peak, &peak_val) = rs_curve
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let rs_ok = rs_curve[peak + 1..].iter().all(|&v| v <= peak_val + tolerance)
        && rs_curve.last().unwrap() < &(peak_val - tolerance);
    check(
        "09 step-sweep-trend",
        co_ok && rs_ok,
        &format!("co {co_curve:?} non-decreasing; rs {rs_curve:?} non-increasing past peak (tol 3 points)"),
    );
}

// ── criterion 10: ablation directions ───────────────────────────────────

#[test]
fn a10_ablation_directions() {
    let base = shapes_base();
    let det = NoiseSpec::deterministic();
    let sched = sched_default();
    let with_clip = eval_asr(co_attack(), &base.src.clf, &base.src.store, &base.holdout.inputs, 32, &sched, EPS_DESK, &det);
    let without_clip = eval_asr(noclip_attack(), &base.src.clf, &base.src.store, &base.holdout.inputs, 32, &sched, EPS_DESK, &det);

    // adapters disabled entirely: the reverse flow is the frozen conditional
    // base field; targeted ASR must sit at chance
    let nolora = TrainedAttack { model: base.flow_model.clone(), store: base.flow_store.clone() };
    let nolora_asr = eval_asr(&nolora, &base.src.clf, &base.src.store, &base.holdout.inputs, 32, &sched, EPS_DESK, &det);
    let chance = 1.0 / 8.0;

    check(
        "10 ablation-directions",
        with_clip > without_clip && (nolora_asr - chance).abs() <= 0.02 && with_clip > chance + 0.02,
        &format!(
            "with-clip {} > without-clip {}; no-adapter {} within 2 points of chance {}",
            fmt_f32(with_clip),
            fmt_f32(without_clip),
            fmt_f32(nolora_asr),
            fmt_f32(chance)
        ),
    );
}

// ── criterion 11: determinism ───────────────────────────────────────────

fn mini_pipeline(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let data = generate_shapes(21, 160).unwrap();
    write_dataset_cache(
        &dir.join("shapes.ds"),
        &data,
        &DatasetHeader { seed: 21, n: 160, classes: 8, height: 16, width: 16 },
    )
    .unwrap();

    let mut rng = Rng::seed_from(5);
    let mut vstore = ParamStore::new();
    let mut model =
        VelocityModel::init(&mut vstore, VelocityModelCfg::for_images(256, 8), &mut rng).unwrap();
    let pre = pretrain_flow_matching(
        &model,
        &mut vstore,
        &data.inputs,
        &TrainConfig {
            epochs: 2,
            batch_size: 16,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 5,
            eval_split: 0.2,
        },
    )
    .unwrap();
    let mut pre_csv = MetricsCsv::new(&["epoch", "loss"]);
    for (i, &l) in pre.loss_curve.iter().enumerate() {
        pre_csv.push_row(vec![i.to_string(), fmt_f32(l)]).unwrap();
    }
    pre_csv.write(&dir.join("pretrain_loss.csv")).unwrap();

    let trained = train_classifier(
        ClassifierCfg::small_conv(16, 8),
        &data,
        &TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr: 2e-3,
            optimizer: OptimizerKind::Adam,
            seed: 6,
            eval_split: 0.2,
        },
    )
    .unwrap();

    let mut arng = Rng::seed_from(9).fork(0x6C6F_7261);
    model.attach_adapters(&mut vstore, 4, 4.0, &mut arng).unwrap();
    let mut cfg = AttackConfig::new(EPS_DESK, sched_default(), (0..8).collect());
    cfg.steps = 120;
    cfg.lr = ATTACK_LR;
    cfg.optimizer = OptimizerKind::Adam;
    cfg.unit_domain = true;
    cfg.seed = 9;
    let outcome = train_dual_flow(
        &model,
        &mut vstore,
        &trained.classifier,
        &trained.store,
        &data.inputs,
        &cfg,
    )
    .unwrap();
    let mut loss_csv = MetricsCsv::new(&["step", "loss"]);
    for &(s, l) in &outcome.loss_curve {
        loss_csv.push_row(vec![s.to_string(), fmt_f32(l)]).unwrap();
    }
    loss_csv.write(&dir.join("attack_loss.csv")).unwrap();

    let meta = CheckpointMeta {
        seed: 9,
        step_count: outcome.optimizer_steps,
        config: model.meta(),
    };
    save_checkpoint(&vstore, &meta, &dir.join("attack.ckpt")).unwrap();

    // evaluation CSV + visualization dumps
    let idx: Vec<usize> = (0..16).collect();
    let (x, _) = data.batch(&idx).unwrap();
    let targets: Vec<usize> = (0..16).map(|i| i % 8).collect();
    let attack = TrainedAttack { model, store: vstore };
    let mut samples = sample_dual_flow_batch(
        &attack.model,
        &attack.store,
        &x,
        &targets,
        &sched_default(),
        EPS_DESK,
        &NoiseSpec::deterministic(),
        true,
    )
    .unwrap();
    let report =
        compute_asr(&trained.classifier, &trained.store, &mut samples, "source", true).unwrap();
    let mut eval_csv = MetricsCsv::new(&["victim", "asr"]);
    eval_csv.push_row(vec![report.victim.clone(), fmt_f32(report.mean_asr)]).unwrap();
    eval_csv.write(&dir.join("eval.csv")).unwrap();
    emit_visualization(&samples[0], 16, dir, "viz0").unwrap();
}

#[test]
fn a11_determinism() {
    let root = std::env::temp_dir().join(format!("dualflow-det-{}", std::process::id()));
    let d1 = root.join("run1");
    let d2 = root.join("run2");
    mini_pipeline(&d1);
    mini_pipeline(&d2);
    let mut files: Vec<String> = std::fs::read_dir(&d1)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert!(files.len() >= 7, "expected pipeline outputs, got {files:?}");
    let mut all_equal = true;
    for f in &files {
        let b1 = std::fs::read(d1.join(f)).unwrap();
        let b2 = std::fs::read(d2.join(f)).unwrap();
        if b1 != b2 {
            all_equal = false;
            eprintln!("file {f} differs between runs");
        }
    }
    check(
        "11 determinism",
        all_equal,
        &format!("{} pipeline artifacts byte-identical across reruns", files.len()),
    );
    std::fs::remove_dir_all(&root).ok();
}

// ── criterion 12: evaluation plumbing ───────────────────────────────────

#[test]
fn a12_evaluation_plumbing() {
    // black-box average excludes the white-box column
    let gmm = gmm_base();
    let data = &gmm.data;
    let mut rng = Rng::seed_from(99);
    let second = train_classifier(
        ClassifierCfg::mlp(2, 8),
        data,
        &TrainConfig { epochs: 6, seed: 12, ..TrainConfig::default() },
    )
    .unwrap();
    let mk_sample = |i: usize| {
        let x = data.inputs.row(i).unwrap();
        AdvSample {
            original: x.clone(),
            pre_clip: x.clone(),
            clipped: x,
            target: data.labels[i],
            predictions: BTreeMap::new(),
        }
    };
    let mut samples: Vec<AdvSample> = (0..40).map(mk_sample).collect();
    let victims = vec![
        Victim { name: "src".into(), classifier: &gmm.smooth.clf, store: &gmm.smooth.store, is_source: true },
        Victim { name: "blk".into(), classifier: &second.classifier, store: &second.store, is_source: false },
    ];
    let table = transfer_matrix(&victims, &mut samples).unwrap();
    let excludes_white = table.black_box_average.unwrap() == table.entries[1].mean_asr
        && table.entries[0].white_box;

    // split CI half-width is zero iff splits identical
    let zero_ci = split_confidence_interval(&[0.5; 5], 1.96).unwrap().half_width == 0.0;
    let nonzero_ci = split_confidence_interval(&[0.5, 0.5, 0.52, 0.5, 0.5], 1.96)
        .unwrap()
        .half_width
        > 0.0;
    let splits = split_asrs(&gmm.smooth.clf, &gmm.smooth.store, &samples, 5).unwrap();
    assert_eq!(splits.len(), 5);

    // checkpoint round-trips bit-exact over 50 random stores
    let mut roundtrips_ok = true;
    for seed in 0..50u64 {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::new(vec![3, 4], rng.normal_vec(12, 1.0)).unwrap(), seed % 2 == 0)
            .unwrap();
        store
            .insert("b", Tensor::new(vec![4], rng.normal_vec(4, 1.0)).unwrap(), true)
            .unwrap();
        let meta = CheckpointMeta { seed, step_count: seed, config: BTreeMap::new() };
        let bytes = checkpoint_to_bytes(&store, &meta).unwrap();
        let (loaded, lmeta) = checkpoint_from_bytes(&bytes).unwrap();
        roundtrips_ok &= lmeta == meta;
        for name in store.names() {
            roundtrips_ok &= store.get(name).unwrap() == loaded.get(name).unwrap();
            roundtrips_ok &=
                store.is_trainable(name).unwrap() == loaded.is_trainable(name).unwrap();
        }
        roundtrips_ok &= checkpoint_to_bytes(&loaded, &lmeta).unwrap() == bytes;
    }

    check(
        "12 evaluation-plumbing",
        excludes_white && zero_ci && nonzero_ci && roundtrips_ok,
        "black-box average excludes white-box; CI half-width zero iff splits equal; 50 checkpoint round-trips bit-exact",
    );
}

// ── auxiliary: perturbation-only classification direction ───────────────

#[test]
fn aux_perturbation_only_direction() {
    // rescaled perturbations alone already carry target semantics: the rate
    // must beat chance on the source model
    let base = shapes_base();
    let attack = co_attack();
    let idx: Vec<usize> = (0..24).collect();
    let (x, _) = base.holdout.batch(&idx).unwrap();
    let mut samples = Vec::new();
    for c in 0..8usize {
        let targets = vec![c; 24];
        samples.extend(
            sample_dual_flow_batch(
                &attack.model,
                &attack.store,
                &x,
                &targets,
                &sched_default(),
                EPS_DESK,
                &NoiseSpec::deterministic(),
                true,
            )
            .unwrap(),
        );
    }
    let rate = perturbation_asr(&base.src.clf, &base.src.store, &samples).unwrap();
    check(
        "aux perturbation-only",
        rate > 0.125 + 0.05,
        &format!("perturbation-only ASR {} above chance 0.125", fmt_f32(rate)),
    );
}

// ── auxiliary: masked single-target fine-tuning direction ───────────────

fn one_class_asr(attack: &TrainedAttack, clf: &Classifier, cstore: &ParamStore, inputs: &Tensor, n: usize, c: usize) -> f32 {
    let d = inputs.shape()[1];
    let n = n.min(inputs.shape()[0]);
    let x = Tensor::new(vec![n, d], inputs.data()[..n * d].to_vec()).unwrap();
    let targets = vec![c; n];
    let samples = sample_dual_flow_batch(
        &attack.model,
        &attack.store,
        &x,
        &targets,
        &sched_default(),
        EPS_DESK,
        &NoiseSpec::deterministic(),
        true,
    )
    .unwrap();
    let rows: Vec<Tensor> = samples.iter().map(|s| s.clipped.clone()).collect();
    let preds = clf.predict(cstore, &Tensor::stack_rows(&rows).unwrap()).unwrap();
    preds.iter().filter(|&&p| p == c).count() as f32 / n as f32
}

#[test]
fn aux_single_target_finetune_direction() {
    // specializing the multi-target adapters to one class with random square
    // masks must not lose ground on that class; specialization runs at a
    // quarter of the multi-target rate
    let base = shapes_base();
    let co = co_attack();
    let c = 2usize;
    let multi = one_class_asr(co, &base.src.clf, &base.src.store, &base.holdout.inputs, 96, c);

    let model = co.model.clone();
    let mut store = co.store.clone();
    let mut cfg = AttackConfig::new(EPS_DESK, sched_default(), (0..8).collect());
    cfg.steps = 3000;
    cfg.lr = ATTACK_LR / 4.0;
    cfg.optimizer = OptimizerKind::Adam;
    cfg.unit_domain = true;
    cfg.seed = 13;
    let mcfg = dualflow_core::attack::MaskConfig { squares: 2, side_min: 3, side_max: 6, seed: 31 };
    dualflow_core::attack::finetune_single_target(
        &model,
        &mut store,
        &base.src.clf,
        &base.src.store,
        &base.train.inputs,
        c,
        &cfg,
        &mcfg,
    )
    .unwrap();
    let tuned = TrainedAttack { model, store };
    let single = one_class_asr(&tuned, &base.src.clf, &base.src.store, &base.holdout.inputs, 96, c);
    check(
        "aux single-target-finetune",
        single >= multi,
        &format!("class {c}: fine-tuned {} >= multi-target {}", fmt_f32(single), fmt_f32(multi)),
    );
}

// ── auxiliary: generation sanity after pretraining ──────────────────────

#[test]
fn aux_generation_sanity() {
    // reverse integration from pure noise over the full time range produces
    // samples the source classifier reacts to non-uniformly
    let base = shapes_base();
    let mut rng = Rng::seed_from(77);
    let z = Tensor::new(vec![8, 256], rng.normal_vec(8 * 256, 1.0)).unwrap();
    let sched = FlowSchedule::new(1.0, 64).unwrap();
    let (gen, _) = dualflow_core::flow::reverse_integrate(
        |xs, t| base.flow_model.eval(&base.flow_store, xs, t, BatchCond::Null, false),
        &z,
        &sched,
        &NoiseSpec::deterministic(),
    )
    .unwrap();
    let clamped = Tensor::new(
        gen.shape().to_vec(),
        gen.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
    .unwrap();
    let logits = base.src.clf.eval(&base.src.store, &clamped).unwrap();
    // non-uniform: the spread of logits within a row is well away from zero
    let mut max_spread = 0.0f32;
    for r in 0..8 {
        let row = &logits.data()[r * 8..(r + 1) * 8];
        let lo = row.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        max_spread = max_spread.max(hi - lo);
    }
    check(
        "aux generation-sanity",
        max_spread > 0.5,
        &format!("max logit spread over generated samples {}", fmt_f32(max_spread)),
    );
}
