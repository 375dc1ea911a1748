//! Command implementations over the core library.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dualflow_core::attack::{
    finetune_single_target, sample_dual_flow_batch, train_dual_flow, AdvSample, AttackConfig,
    AttackVariant, MaskConfig,
};
use dualflow_core::data::{
    generate_gmm2d, generate_shapes, pretrain_flow_matching, read_dataset_cache, train_classifier as train_cls,
    write_dataset_cache, DatasetHeader, LabeledData, TrainConfig,
};
use dualflow_core::eval::{
    defended_asr, perturbation_asr, split_asrs, split_confidence_interval, transfer_matrix,
    DefenseSpec, Victim,
};
use dualflow_core::flow::{FlowSchedule, NoiseSpec};
use dualflow_core::io::{
    emit_visualization, fmt_f32, load_checkpoint, read_config, save_checkpoint, CheckpointMeta,
    MetricsCsv,
};
use dualflow_core::nn::{Classifier, ClassifierArch, ClassifierCfg, VelocityModel, VelocityModelCfg};
use dualflow_core::rng::Rng;
use dualflow_core::tensor::{OptimizerKind, ParamStore};
use dualflow_core::theory::{
    verify_cascade as run_cascade_check, verify_morse_flow, CascadeCheckConfig, MorseProblem,
};
use dualflow_core::{CoreError, Result};

pub struct DataSpec {
    pub path: PathBuf,
    pub dataset: String,
    pub n: usize,
    pub seed: u64,
}

/// Load the dataset cache, regenerating (and writing) it when absent.
fn resolve_dataset(spec: &DataSpec) -> Result<LabeledData> {
    if spec.path.exists() {
        let (data, _) = read_dataset_cache(&spec.path)?;
        return Ok(data);
    }
    let (data, header) = match spec.dataset.as_str() {
        "shapes" => {
            let d = generate_shapes(spec.seed, spec.n)?;
            let h = DatasetHeader {
                seed: spec.seed,
                n: d.len(),
                classes: d.classes,
                height: 16,
                width: 16,
            };
            (d, h)
        }
        "gmm2d" => {
            let d = generate_gmm2d(spec.seed, spec.n, 8)?;
            let h = DatasetHeader {
                seed: spec.seed,
                n: d.len(),
                classes: d.classes,
                height: 1,
                width: 2,
            };
            (d, h)
        }
        other => {
            return Err(CoreError::InvalidArgument(format!("unknown dataset kind '{other}'")))
        }
    };
    if let Some(parent) = spec.path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_dataset_cache(&spec.path, &data, &header)?;
    Ok(data)
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn data_is_unit_interval(data: &LabeledData) -> bool {
    data.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v))
}

fn load_velocity(path: &Path) -> Result<(VelocityModel, ParamStore, CheckpointMeta)> {
    let (store, meta) = load_checkpoint(path)?;
    let model = VelocityModel::from_meta(&meta.config, &store)?;
    Ok((model, store, meta))
}

fn load_classifier(path: &Path) -> Result<(Classifier, ParamStore, CheckpointMeta)> {
    let (store, meta) = load_checkpoint(path)?;
    let clf = Classifier::from_meta(&meta.config, &store)?;
    Ok((clf, store, meta))
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| CoreError::InvalidArgument(format!("bad integer '{t}'")))
        })
        .collect()
}

fn parse_f32_list(s: &str) -> Result<Vec<f32>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f32>()
                .map_err(|_| CoreError::InvalidArgument(format!("bad number '{t}'")))
        })
        .collect()
}

fn parse_named_paths(s: &str) -> Result<Vec<(String, PathBuf)>> {
    s.split(',')
        .map(|pair| {
            pair.split_once('=')
                .map(|(n, p)| (n.trim().to_string(), PathBuf::from(p.trim())))
                .ok_or_else(|| {
                    CoreError::InvalidArgument(format!("expected name=path, got '{pair}'"))
                })
        })
        .collect()
}

// ── gen-data ────────────────────────────────────────────────────────────

pub fn gen_data(spec: &DataSpec, out: &Path) -> Result<()> {
    ensure_out(out)?;
    if spec.path.exists() {
        std::fs::remove_file(&spec.path)?;
    }
    let data = resolve_dataset(spec)?;
    println!(
        "dataset '{}': {} samples, {} classes, dim {} -> {}",
        spec.dataset,
        data.len(),
        data.classes,
        data.dim(),
        spec.path.display()
    );
    Ok(())
}

// ── pretrain ────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    spec: &DataSpec,
    out: &Path,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    lr: f32,
    optimizer: &str,
) -> Result<()> {
    ensure_out(out)?;
    let data = resolve_dataset(spec)?;
    let mut rng = Rng::seed_from(seed);
    let cfg = if data.dim() == 2 {
        VelocityModelCfg::for_points(data.classes)
    } else {
        VelocityModelCfg::for_images(data.dim(), data.classes)
    };
    let mut store = ParamStore::new();
    let model = VelocityModel::init(&mut store, cfg, &mut rng)?;
    let tcfg = TrainConfig {
        epochs,
        batch_size,
        lr,
        optimizer: OptimizerKind::parse(optimizer)?,
        seed,
        eval_split: 0.2,
    };
    let outcome = pretrain_flow_matching(&model, &mut store, &data.inputs, &tcfg)?;

    let mut csv = MetricsCsv::new(&["epoch", "loss"]);
    for (i, &l) in outcome.loss_curve.iter().enumerate() {
        csv.push_row(vec![i.to_string(), fmt_f32(l)])?;
    }
    csv.write(&out.join("pretrain_loss.csv"))?;

    let meta = CheckpointMeta { seed, step_count: 0, config: model.meta() };
    let ckpt = out.join("flow.ckpt");
    save_checkpoint(&store, &meta, &ckpt)?;
    println!(
        "pretrained flow: {} epochs, loss {} -> {}, checkpoint {}",
        epochs,
        outcome.loss_curve.first().map(|v| fmt_f32(*v)).unwrap_or_else(|| "-".into()),
        outcome.loss_curve.last().map(|v| fmt_f32(*v)).unwrap_or_else(|| "-".into()),
        ckpt.display()
    );
    Ok(())
}

// ── train-classifier ────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    spec: &DataSpec,
    out: &Path,
    seed: u64,
    arch: &str,
    smooth: bool,
    epochs: usize,
    batch_size: usize,
    lr: f32,
    name: &str,
) -> Result<()> {
    ensure_out(out)?;
    let data = resolve_dataset(spec)?;
    let arch = ClassifierArch::parse(arch)?;
    let mut cfg = match arch {
        ClassifierArch::Mlp => ClassifierCfg::mlp(data.dim(), data.classes),
        ClassifierArch::SmallConv => {
            let side = (data.dim() as f64).sqrt() as usize;
            if side * side != data.dim() {
                return Err(CoreError::InvalidArgument(
                    "small-conv needs square image inputs".into(),
                ));
            }
            ClassifierCfg::small_conv(side, data.classes)
        }
    };
    if smooth {
        cfg = cfg.smooth();
    }
    let tcfg = TrainConfig {
        epochs,
        batch_size,
        lr,
        optimizer: OptimizerKind::Adam,
        seed,
        eval_split: 0.2,
    };
    let trained = train_cls(cfg, &data, &tcfg)?;

    let mut csv = MetricsCsv::new(&["epoch", "loss"]);
    for (i, &l) in trained.loss_curve.iter().enumerate() {
        csv.push_row(vec![i.to_string(), fmt_f32(l)])?;
    }
    csv.write(&out.join(format!("{name}_loss.csv")))?;

    let meta = CheckpointMeta { seed, step_count: 0, config: trained.classifier.meta() };
    let ckpt = out.join(format!("{name}.ckpt"));
    save_checkpoint(&trained.store, &meta, &ckpt)?;
    println!(
        "classifier '{name}' ({}): test accuracy {} -> {}",
        trained.classifier.cfg.arch.name(),
        fmt_f32(trained.test_accuracy),
        ckpt.display()
    );
    Ok(())
}

// ── attack-train ────────────────────────────────────────────────────────

pub struct AttackTrainArgs {
    pub data: DataSpec,
    pub out: PathBuf,
    pub flow: PathBuf,
    pub classifier: PathBuf,
    pub seed: u64,
    pub config: Option<PathBuf>,
    pub epsilon: Option<f32>,
    pub lr: Option<f32>,
    pub steps: Option<usize>,
    pub variant: Option<String>,
    pub tau: Option<f32>,
    pub n_steps: Option<usize>,
    pub gamma: Option<f32>,
    pub train_clip: Option<bool>,
    pub l2_weight: Option<f32>,
    pub lora_rank: Option<usize>,
    pub targets: Option<String>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<String>,
    pub single_target: Option<usize>,
    pub mask_squares: usize,
    pub mask_side_min: usize,
    pub mask_side_max: usize,
}

struct Merged {
    file: BTreeMap<String, String>,
}

impl Merged {
    fn get<T: std::str::FromStr>(
        &self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file.get(key) {
            Some(s) => s
                .parse::<T>()
                .map_err(|_| CoreError::InvalidArgument(format!("bad config value for '{key}': '{s}'"))),
            None => Ok(default),
        }
    }

    fn get_string(&self, key: &str, flag: Option<String>, default: &str) -> String {
        flag.or_else(|| self.file.get(key).cloned()).unwrap_or_else(|| default.to_string())
    }
}

fn build_attack_config(
    a: &AttackTrainArgs,
    num_classes: usize,
    unit_domain: bool,
) -> Result<AttackConfig> {
    let merged = Merged {
        file: match &a.config {
            Some(p) => read_config(p)?,
            None => BTreeMap::new(),
        },
    };
    let tau = merged.get("tau", a.tau, 0.25)?;
    let n_steps = merged.get("n_steps", a.n_steps, 6)?;
    let sched = FlowSchedule::new(tau, n_steps)?;
    let variant = AttackVariant::parse(&merged.get_string("variant", a.variant.clone(), "co"))?;
    let gamma = merged.get("gamma", a.gamma, if variant == AttackVariant::CascadeSde { 0.5 } else { 0.0 })?;
    let targets_str = merged.get_string("targets", a.targets.clone(), "all");
    let targets = if targets_str == "all" {
        (0..num_classes).collect()
    } else {
        parse_usize_list(&targets_str)?
    };
    let noise = if gamma > 0.0 {
        NoiseSpec::stochastic(gamma, a.seed ^ 0x6E6F_6973)?
    } else {
        NoiseSpec::deterministic()
    };
    let mut cfg = AttackConfig::new(merged.get("epsilon", a.epsilon, 16.0 / 255.0)?, sched, targets);
    cfg.lr = merged.get("lr", a.lr, 1e-3)?;
    cfg.steps = merged.get("steps", a.steps, 3000)?;
    cfg.variant = variant;
    cfg.train_clip = merged.get("train_clip", a.train_clip, true)?;
    cfg.l2_weight = merged.get("l2_weight", a.l2_weight, 0.0)?;
    cfg.noise = noise;
    cfg.batch_size = merged.get("batch_size", a.batch_size, 8)?;
    cfg.optimizer = OptimizerKind::parse(&merged.get_string("optimizer", a.optimizer.clone(), "adam"))?;
    cfg.eval_every = 0;
    cfg.unit_domain = unit_domain;
    cfg.seed = a.seed;
    Ok(cfg)
}

fn attack_meta_config(cfg: &AttackConfig, model: &VelocityModel) -> BTreeMap<String, String> {
    let mut m = model.meta();
    m.insert("epsilon".into(), fmt_f32(cfg.epsilon));
    m.insert("lr".into(), fmt_f32(cfg.lr));
    m.insert("steps".into(), cfg.steps.to_string());
    m.insert("variant".into(), cfg.variant.name().into());
    m.insert("tau".into(), fmt_f32(cfg.sched.tau()));
    m.insert("n_steps".into(), cfg.sched.steps().to_string());
    m.insert("gamma".into(), fmt_f32(cfg.noise.gamma));
    m.insert("train_clip".into(), cfg.train_clip.to_string());
    m.insert("l2_weight".into(), fmt_f32(cfg.l2_weight));
    m.insert(
        "targets".into(),
        cfg.targets.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "),
    );
    m.insert("unit_domain".into(), cfg.unit_domain.to_string());
    m
}

fn attack_params_from_meta(
    meta: &CheckpointMeta,
) -> Result<(f32, FlowSchedule, f32, Vec<usize>, bool)> {
    let cfg = &meta.config;
    let get = |k: &str| -> Result<&String> {
        cfg.get(k).ok_or_else(|| CoreError::Format(format!("checkpoint missing '{k}'")))
    };
    let eps: f32 =
        get("epsilon")?.parse().map_err(|_| CoreError::Format("bad epsilon".into()))?;
    let tau: f32 = get("tau")?.parse().map_err(|_| CoreError::Format("bad tau".into()))?;
    let n: usize = get("n_steps")?.parse().map_err(|_| CoreError::Format("bad n_steps".into()))?;
    let gamma: f32 = get("gamma")?.parse().map_err(|_| CoreError::Format("bad gamma".into()))?;
    let targets: Vec<usize> = get("targets")?
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| CoreError::Format("bad target".into())))
        .collect::<Result<_>>()?;
    let unit: bool = get("unit_domain")?
        .parse()
        .map_err(|_| CoreError::Format("bad unit_domain".into()))?;
    Ok((eps, FlowSchedule::new(tau, n)?, gamma, targets, unit))
}

pub fn attack_train(a: AttackTrainArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let data = resolve_dataset(&a.data)?;
    let unit = data_is_unit_interval(&data);
    let (mut model, mut vstore, _) = load_velocity(&a.flow)?;
    let (clf, cstore, _) = load_classifier(&a.classifier)?;
    let cfg = build_attack_config(&a, model.cfg.num_classes, unit)?;

    if !model.has_adapters() {
        let rank = {
            let merged = Merged {
                file: match &a.config {
                    Some(p) => read_config(p)?,
                    None => BTreeMap::new(),
                },
            };
            merged.get("lora_rank", a.lora_rank, 4)?
        };
        let mut rng = Rng::seed_from(a.seed).fork(0x6C6F_7261);
        model.attach_adapters(&mut vstore, rank, rank as f32, &mut rng)?;
    }

    let outcome = match a.single_target {
        Some(c) => {
            let mcfg = MaskConfig {
                squares: a.mask_squares,
                side_min: a.mask_side_min,
                side_max: a.mask_side_max,
                seed: a.seed ^ 0x6D61_736B,
            };
            finetune_single_target(&model, &mut vstore, &clf, &cstore, &data.inputs, c, &cfg, &mcfg)?
        }
        None => train_dual_flow(&model, &mut vstore, &clf, &cstore, &data.inputs, &cfg)?,
    };

    let mut loss_csv = MetricsCsv::new(&["step", "loss"]);
    for &(s, l) in &outcome.loss_curve {
        loss_csv.push_row(vec![s.to_string(), fmt_f32(l)])?;
    }
    loss_csv.write(&a.out.join("attack_loss.csv"))?;
    let mut asr_csv = MetricsCsv::new(&["step", "whitebox_asr"]);
    for &(s, v) in &outcome.asr_curve {
        asr_csv.push_row(vec![s.to_string(), fmt_f32(v)])?;
    }
    asr_csv.write(&a.out.join("attack_asr.csv"))?;

    let meta = CheckpointMeta {
        seed: a.seed,
        step_count: outcome.optimizer_steps,
        config: attack_meta_config(&cfg, &model),
    };
    let ckpt = a.out.join("attack.ckpt");
    save_checkpoint(&vstore, &meta, &ckpt)?;
    let final_asr = outcome.asr_curve.last().map(|&(_, v)| v).unwrap_or(0.0);
    println!(
        "attack '{}': {} steps, white-box ASR {} -> {}",
        cfg.variant.name(),
        outcome.optimizer_steps,
        fmt_f32(final_asr),
        ckpt.display()
    );
    Ok(())
}

// ── attack-sample ───────────────────────────────────────────────────────

/// Batched sampling over the first rows of the dataset, targets either fixed
/// or cycling over the checkpoint's target set.
fn generate_samples(
    model: &VelocityModel,
    store: &ParamStore,
    data: &LabeledData,
    n_samples: usize,
    fixed_target: Option<usize>,
    sched: &FlowSchedule,
    eps: f32,
    noise: &NoiseSpec,
    targets_set: &[usize],
    unit: bool,
) -> Result<Vec<AdvSample>> {
    let n = n_samples.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let (x, _) = data.batch(&idx)?;
    let targets: Vec<usize> = (0..n)
        .map(|i| fixed_target.unwrap_or(targets_set[i % targets_set.len()]))
        .collect();
    sample_dual_flow_batch(model, store, &x, &targets, sched, eps, noise, unit)
}

pub fn attack_sample(
    spec: &DataSpec,
    out: &Path,
    flow: &Path,
    n_samples: usize,
    target: Option<usize>,
    gamma: Option<f32>,
    noise_seed: u64,
) -> Result<()> {
    ensure_out(out)?;
    let data = resolve_dataset(spec)?;
    let (model, store, meta) = load_velocity(flow)?;
    let (eps, sched, meta_gamma, targets, unit) = attack_params_from_meta(&meta)?;
    let g = gamma.unwrap_or(meta_gamma);
    let noise = if g > 0.0 { NoiseSpec::stochastic(g, noise_seed)? } else { NoiseSpec::deterministic() };
    let samples = generate_samples(
        &model, &store, &data, n_samples, target, &sched, eps, &noise, &targets, unit,
    )?;

    let mut csv = MetricsCsv::new(&["index", "target", "linf"]);
    let mut worst = 0.0f32;
    for (i, s) in samples.iter().enumerate() {
        let linf = s.linf();
        worst = worst.max(linf);
        csv.push_row(vec![i.to_string(), s.target.to_string(), fmt_f32(linf)])?;
    }
    csv.write(&out.join("samples.csv"))?;
    println!(
        "sampled {} adversarial examples (budget {}, worst linf {})",
        samples.len(),
        fmt_f32(eps),
        fmt_f32(worst)
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

pub struct EvalArgs {
    pub data: DataSpec,
    pub out: PathBuf,
    pub flow: PathBuf,
    pub source: PathBuf,
    pub victims: Option<String>,
    pub n_eval: usize,
    pub gamma: Option<f32>,
    pub noise_seed: u64,
    pub defenses: Option<String>,
    pub splits: usize,
    pub perturbation_only: bool,
}

fn parse_defense(token: &str) -> Result<(String, DefenseSpec)> {
    let (kind, param) = token.split_once(':').unwrap_or((token, ""));
    let spec = match kind {
        "none" => DefenseSpec::None,
        "gaussian" => DefenseSpec::GaussianSmooth {
            sigma: param
                .parse()
                .map_err(|_| CoreError::InvalidArgument(format!("bad sigma '{param}'")))?,
        },
        "median" => DefenseSpec::MedianSmooth {
            window: param
                .parse()
                .map_err(|_| CoreError::InvalidArgument(format!("bad window '{param}'")))?,
        },
        "quantize" => DefenseSpec::Quantize {
            levels: param
                .parse()
                .map_err(|_| CoreError::InvalidArgument(format!("bad levels '{param}'")))?,
        },
        other => return Err(CoreError::InvalidArgument(format!("unknown defense '{other}'"))),
    };
    spec.validate()?;
    Ok((token.to_string(), spec))
}

pub fn eval(e: EvalArgs) -> Result<()> {
    ensure_out(&e.out)?;
    let data = resolve_dataset(&e.data)?;
    let (model, vstore, meta) = load_velocity(&e.flow)?;
    let (eps, sched, meta_gamma, targets, unit) = attack_params_from_meta(&meta)?;
    let g = e.gamma.unwrap_or(meta_gamma);
    let noise = if g > 0.0 {
        NoiseSpec::stochastic(g, e.noise_seed)?
    } else {
        NoiseSpec::deterministic()
    };

    let (src_clf, src_store, _) = load_classifier(&e.source)?;
    let mut victim_models: Vec<(String, Classifier, ParamStore)> = Vec::new();
    if let Some(v) = &e.victims {
        for (name, path) in parse_named_paths(v)? {
            let (clf, store, _) = load_classifier(&path)?;
            victim_models.push((name, clf, store));
        }
    }

    // the evaluation protocol: every input attacked once per target class
    let n = e.n_eval.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let (x, _) = data.batch(&idx)?;
    let mut samples: Vec<AdvSample> = Vec::with_capacity(n * targets.len());
    for &c in &targets {
        let t = vec![c; n];
        samples.extend(sample_dual_flow_batch(
            &model, &vstore, &x, &t, &sched, eps, &noise, unit,
        )?);
    }

    let victims: Vec<Victim<'_>> = std::iter::once(Victim {
        name: "source".to_string(),
        classifier: &src_clf,
        store: &src_store,
        is_source: true,
    })
    .chain(victim_models.iter().map(|(name, clf, store)| Victim {
        name: name.clone(),
        classifier: clf,
        store,
        is_source: false,
    }))
    .collect();

    let table = transfer_matrix(&victims, &mut samples)?;
    print!("{}", table.render());

    let mut csv = MetricsCsv::new(&["victim", "kind", "asr"]);
    for entry in &table.entries {
        csv.push_row(vec![
            entry.victim.clone(),
            if entry.white_box { "white-box".into() } else { "black-box".into() },
            fmt_f32(entry.mean_asr),
        ])?;
    }
    if let Some(avg) = table.black_box_average {
        csv.push_row(vec!["black-box-average".into(), "average".into(), fmt_f32(avg)])?;
    }
    csv.write(&e.out.join("transfer.csv"))?;

    let mut per_class = MetricsCsv::new(&["victim", "target_class", "asr"]);
    for entry in &table.entries {
        for (&c, &asr) in &entry.per_class {
            per_class.push_row(vec![entry.victim.clone(), c.to_string(), fmt_f32(asr)])?;
        }
    }
    per_class.write(&e.out.join("per_class.csv"))?;

    let side = (data.dim() as f64).sqrt() as usize;
    if let Some(defs) = &e.defenses {
        if side * side != data.dim() {
            return Err(CoreError::InvalidArgument(
                "defense sweep needs square image inputs".into(),
            ));
        }
        let mut dcsv = MetricsCsv::new(&["victim", "defense", "asr"]);
        for token in defs.split(',') {
            let (label, spec) = parse_defense(token.trim())?;
            for v in &victims {
                let asr = defended_asr(v.classifier, v.store, &samples, side, &spec)?;
                dcsv.push_row(vec![v.name.clone(), label.clone(), fmt_f32(asr)])?;
            }
        }
        dcsv.write(&e.out.join("defense.csv"))?;
    }

    if e.splits >= 2 {
        let mut ccsv = MetricsCsv::new(&["victim", "mean", "half_width"]);
        for v in &victims {
            let per_split = split_asrs(v.classifier, v.store, &samples, e.splits)?;
            let ci = split_confidence_interval(&per_split, 1.96)?;
            ccsv.push_row(vec![
                v.name.clone(),
                fmt_f32(ci.mean as f32),
                fmt_f32(ci.half_width as f32),
            ])?;
        }
        ccsv.write(&e.out.join("confidence.csv"))?;
    }

    if e.perturbation_only {
        let mut pcsv = MetricsCsv::new(&["victim", "perturbation_asr"]);
        for v in &victims {
            let asr = perturbation_asr(v.classifier, v.store, &samples)?;
            pcsv.push_row(vec![v.name.clone(), fmt_f32(asr)])?;
        }
        pcsv.write(&e.out.join("perturbation.csv"))?;
    }

    Ok(())
}

// ── ablate ──────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
pub fn ablate(
    spec: &DataSpec,
    out: &Path,
    flows: &str,
    classifier: &Path,
    victims: Option<&str>,
    steps: &str,
    gammas: &str,
    n_eval: usize,
    noise_seed: u64,
) -> Result<()> {
    ensure_out(out)?;
    let data = resolve_dataset(spec)?;
    let (clf, cstore, _) = load_classifier(classifier)?;
    let mut victim_models: Vec<(String, Classifier, ParamStore)> = Vec::new();
    if let Some(v) = victims {
        for (name, path) in parse_named_paths(v)? {
            let (c, s, _) = load_classifier(&path)?;
            victim_models.push((name, c, s));
        }
    }
    let step_list = parse_usize_list(steps)?;
    let gamma_list = parse_f32_list(gammas)?;

    let header: Vec<&str> = if victim_models.is_empty() {
        vec!["variant", "gamma", "n_steps", "asr_white"]
    } else {
        vec!["variant", "gamma", "n_steps", "asr_white", "asr_black"]
    };
    let mut csv = MetricsCsv::new(&header);

    for (vname, path) in parse_named_paths(flows)? {
        let (model, vstore, meta) = load_velocity(&path)?;
        let (eps, sched0, _, targets, unit) = attack_params_from_meta(&meta)?;
        for &gamma in &gamma_list {
            for &n in &step_list {
                let sched = FlowSchedule::new(sched0.tau(), n)?;
                let noise = if gamma > 0.0 {
                    NoiseSpec::stochastic(gamma, noise_seed)?
                } else {
                    NoiseSpec::deterministic()
                };
                let mut samples = generate_samples(
                    &model, &vstore, &data, n_eval, None, &sched, eps, &noise, &targets, unit,
                )?;
                let victims_row: Vec<Victim<'_>> = std::iter::once(Victim {
                    name: "source".to_string(),
                    classifier: &clf,
                    store: &cstore,
                    is_source: true,
                })
                .chain(victim_models.iter().map(|(name, c, s)| Victim {
                    name: name.clone(),
                    classifier: c,
                    store: s,
                    is_source: false,
                }))
                .collect();
                let table = transfer_matrix(&victims_row, &mut samples)?;
                let white = table.entries[0].mean_asr;
                let mut row = vec![
                    vname.clone(),
                    fmt_f32(gamma),
                    n.to_string(),
                    fmt_f32(white),
                ];
                if !victim_models.is_empty() {
                    row.push(fmt_f32(table.black_box_average.unwrap_or(f32::NAN)));
                }
                csv.push_row(row)?;
            }
        }
    }
    let path = out.join("ablate.csv");
    csv.write(&path)?;
    println!("ablation sweep: {} rows -> {}", csv.rows(), path.display());
    Ok(())
}

// ── verify-morse ────────────────────────────────────────────────────────

pub fn verify_morse(out: &Path, problems: &str, grid: usize, flow_time: f64, tol: f64) -> Result<()> {
    ensure_out(out)?;
    let mut csv = MetricsCsv::new(&[
        "problem",
        "monotone_fraction",
        "strict_increase_fraction",
        "min_mu",
        "min_endpoint_separation",
        "min_abs_det_jacobian",
        "trajectories",
    ]);
    let mut all_ok = true;
    for name in problems.split(',') {
        let name = name.trim();
        let problem = match name {
            "bowl1" => MorseProblem::bowl(1)?,
            "bowl2" => MorseProblem::bowl(2)?,
            "tilted2" => MorseProblem::tilted_quadratic(2)?,
            "bumps2" => MorseProblem::two_bumps()?,
            other => {
                return Err(CoreError::InvalidArgument(format!("unknown problem '{other}'")))
            }
        };
        let report = verify_morse_flow(&problem, grid, flow_time, flow_time / 200.0, tol)?;
        let ok = report.monotone_fraction == 1.0
            && report.min_mu > 0.0
            && report.min_endpoint_separation > 0.0
            && report.min_abs_det_jacobian > 0.0;
        all_ok &= ok;
        println!(
            "{name}: {} (monotone {}, min mu {:.3e}, min endpoint sep {:.3e}, min |det| {:.3e})",
            if ok { "PASS" } else { "FAIL" },
            report.monotone_fraction,
            report.min_mu,
            report.min_endpoint_separation,
            report.min_abs_det_jacobian
        );
        csv.push_row(vec![
            name.to_string(),
            format!("{}", report.monotone_fraction),
            format!("{}", report.strict_increase_fraction),
            format!("{:e}", report.min_mu),
            format!("{:e}", report.min_endpoint_separation),
            format!("{:e}", report.min_abs_det_jacobian),
            report.trajectories.to_string(),
        ])?;
    }
    csv.write(&out.join("morse.csv"))?;
    if all_ok {
        Ok(())
    } else {
        Err(CoreError::InvalidArgument("a flow property check failed".into()))
    }
}

// ── verify-cascade ──────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
pub fn verify_cascade(
    spec: &DataSpec,
    out: &Path,
    flow: &Path,
    classifier: &Path,
    samples: usize,
    lr: f32,
    tau: f32,
    n_steps: usize,
    t_index: usize,
    tol: f64,
    seed: u64,
) -> Result<()> {
    ensure_out(out)?;
    let data = resolve_dataset(spec)?;
    let (mut model, mut vstore, _) = load_velocity(flow)?;
    let (clf, cstore, _) = load_classifier(classifier)?;
    if !model.has_adapters() {
        let mut rng = Rng::seed_from(seed).fork(0x6C6F_7261);
        model.attach_adapters(&mut vstore, 4, 4.0, &mut rng)?;
    }
    let targets: Vec<usize> = (0..model.cfg.num_classes).collect();
    let base = CascadeCheckConfig {
        samples,
        t_index,
        sched: FlowSchedule::new(tau, n_steps)?,
        lr,
        tol,
        require_smooth: true,
    };
    let report = run_cascade_check(&model, &vstore, &clf, &cstore, &data.inputs, &targets, &base)?;
    let control = run_cascade_check(
        &model,
        &vstore,
        &clf,
        &cstore,
        &data.inputs,
        &targets,
        &CascadeCheckConfig { lr: 0.0, ..base.clone() },
    )?;

    println!(
        "cascade improvement: fraction {} (mean dCE {:.3e}) over {} samples; lr=0 control fraction {}",
        report.improvement_fraction, report.mean_ce_delta, report.samples,
        control.improvement_fraction
    );
    let mut csv = MetricsCsv::new(&["lr", "improvement_fraction", "mean_ce_delta", "samples"]);
    csv.push_row(vec![
        fmt_f32(lr),
        format!("{}", report.improvement_fraction),
        format!("{:e}", report.mean_ce_delta),
        report.samples.to_string(),
    ])?;
    csv.push_row(vec![
        fmt_f32(0.0),
        format!("{}", control.improvement_fraction),
        format!("{:e}", control.mean_ce_delta),
        control.samples.to_string(),
    ])?;
    csv.write(&out.join("cascade.csv"))?;
    Ok(())
}

// ── viz ─────────────────────────────────────────────────────────────────

pub fn viz(
    spec: &DataSpec,
    out: &Path,
    flow: &Path,
    index: usize,
    target: usize,
    gamma: Option<f32>,
    noise_seed: u64,
) -> Result<()> {
    ensure_out(out)?;
    let data = resolve_dataset(spec)?;
    let (model, store, meta) = load_velocity(flow)?;
    let (eps, sched, meta_gamma, _, unit) = attack_params_from_meta(&meta)?;
    if index >= data.len() {
        return Err(CoreError::InvalidArgument(format!(
            "index {index} out of {}",
            data.len()
        )));
    }
    let side = (data.dim() as f64).sqrt() as usize;
    if side * side != data.dim() {
        return Err(CoreError::InvalidArgument("viz needs square image inputs".into()));
    }
    let g = gamma.unwrap_or(meta_gamma);
    let noise = if g > 0.0 { NoiseSpec::stochastic(g, noise_seed)? } else { NoiseSpec::deterministic() };
    let (x, _) = data.batch(&[index])?;
    let samples = sample_dual_flow_batch(
        &model,
        &store,
        &x,
        &[target],
        &sched,
        eps,
        &noise,
        unit,
    )?;
    let paths = emit_visualization(&samples[0], side, out, &format!("sample{index}_t{target}"))?;
    println!(
        "wrote {} / {} / {} (linf {})",
        paths[0].display(),
        paths[1].display(),
        paths[2].display(),
        fmt_f32(samples[0].linf())
    );
    Ok(())
}
