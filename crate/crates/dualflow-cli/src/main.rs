//! Command-line driver: dataset generation, pretraining, classifier training,
//! attack training/sampling, evaluation, ablation sweeps, theory verifiers,
//! and visualization dumps.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "dualflow",
    about = "Flow-based targeted adversarial attack workbench",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where a dataset comes from: a cache file, regenerated when absent.
#[derive(Args, Clone)]
struct DataArgs {
    /// dataset cache file (regenerated when absent)
    #[arg(long)]
    data: PathBuf,
    /// generator used when the cache is absent: shapes | gmm2d
    #[arg(long, default_value = "shapes")]
    dataset: String,
    /// sample count when regenerating
    #[arg(long, default_value_t = 800)]
    n: usize,
    /// generator seed when regenerating
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
}

#[derive(Args, Clone)]
struct OutArgs {
    /// output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset cache file
    GenData {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Flow-matching pretraining of the base velocity field
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
        /// run seed (mandatory for training commands)
        #[arg(long, required = true)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        /// sgd | adam
        #[arg(long, default_value = "adam")]
        optimizer: String,
    },
    /// Train a source or victim classifier
    TrainClassifier {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, required = true)]
        seed: u64,
        /// mlp | small-conv
        #[arg(long, default_value = "small-conv")]
        arch: String,
        /// smooth (tanh) activations instead of relu
        #[arg(long, default_value_t = false)]
        smooth: bool,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        /// checkpoint file stem under --out
        #[arg(long, default_value = "classifier")]
        name: String,
    },
    /// Cascading attack training (variants co | cs | rs)
    AttackTrain(Box<AttackTrainCmd>),
    /// Generate adversarial samples from a trained attack checkpoint
    AttackSample {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        flow: PathBuf,
        /// inputs to attack (first rows of the dataset)
        #[arg(long, default_value_t = 64)]
        n_samples: usize,
        /// single target class; omit to cycle over the trained target set
        #[arg(long)]
        target: Option<usize>,
        /// sampler noise scale (0 = deterministic)
        #[arg(long)]
        gamma: Option<f32>,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
    /// Transfer evaluation: per-victim ASR table, defenses, split CIs
    Eval(Box<EvalCmd>),
    /// Sweep variant x sampler-noise x step count over trained checkpoints
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
        /// variant=checkpoint pairs: co=a.ckpt,rs=b.ckpt
        #[arg(long)]
        flows: String,
        #[arg(long)]
        classifier: PathBuf,
        /// extra victims: name=path,...
        #[arg(long)]
        victims: Option<String>,
        /// comma-separated reverse step counts
        #[arg(long, default_value = "1,2,4,8")]
        steps: String,
        /// comma-separated sampler noise scales
        #[arg(long, default_value = "0")]
        gammas: String,
        #[arg(long, default_value_t = 64)]
        n_eval: usize,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
    /// Verify the ascending boundary-damped flow construction
    VerifyMorse {
        #[command(flatten)]
        out: OutArgs,
        /// bowl1 | bowl2 | tilted2 | bumps2 (comma-separated)
        #[arg(long, default_value = "bowl2,tilted2,bumps2")]
        problems: String,
        #[arg(long, default_value_t = 21)]
        grid: usize,
        #[arg(long, default_value_t = 0.5)]
        flow_time: f64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Verify the per-timestep cascading improvement property
    VerifyCascade {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        flow: PathBuf,
        /// smooth-activation classifier checkpoint
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f32,
        #[arg(long, default_value_t = 0.25)]
        tau: f32,
        #[arg(long, default_value_t = 64)]
        n_steps: usize,
        #[arg(long, default_value_t = 32)]
        t_index: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump the pre-clip / clipped / perturbation triptych for one input
    Viz {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        gamma: Option<f32>,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
}

#[derive(Args)]
struct AttackTrainCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
    /// pretrained flow checkpoint
    #[arg(long)]
    flow: PathBuf,
    /// frozen source classifier checkpoint
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long, required = true)]
    seed: u64,
    /// key = value config file; flags below override its keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f32>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    train_clip: Option<bool>,
    #[arg(long)]
    l2_weight: Option<f32>,
    #[arg(long)]
    lora_rank: Option<usize>,
    /// comma-separated target classes; "all" for every class
    #[arg(long)]
    targets: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// sgd | adam for the cascade updates
    #[arg(long)]
    optimizer: Option<String>,
    /// fine-tune for one fixed target with random square masks
    #[arg(long)]
    single_target: Option<usize>,
    #[arg(long, default_value_t = 2)]
    mask_squares: usize,
    #[arg(long, default_value_t = 3)]
    mask_side_min: usize,
    #[arg(long, default_value_t = 6)]
    mask_side_max: usize,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    flow: PathBuf,
    /// source classifier checkpoint (white-box column)
    #[arg(long)]
    source: PathBuf,
    /// extra victims: name=path,name=path
    #[arg(long)]
    victims: Option<String>,
    /// inputs per target class
    #[arg(long, default_value_t = 64)]
    n_eval: usize,
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    /// defense sweep: e.g. gaussian:0.5,gaussian:1.0,median:3,quantize:8
    #[arg(long)]
    defenses: Option<String>,
    /// disjoint splits for confidence intervals (0 disables)
    #[arg(long, default_value_t = 5)]
    splits: usize,
    /// also classify rescaled perturbations alone
    #[arg(long, default_value_t = false)]
    perturbation_only: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { data, out } => commands::gen_data(&data.into(), &out.out),
        Command::Pretrain { data, out, seed, epochs, batch_size, lr, optimizer } => {
            commands::pretrain(&data.into(), &out.out, seed, epochs, batch_size, lr, &optimizer)
        }
        Command::TrainClassifier { data, out, seed, arch, smooth, epochs, batch_size, lr, name } => {
            commands::train_classifier(
                &data.into(),
                &out.out,
                seed,
                &arch,
                smooth,
                epochs,
                batch_size,
                lr,
                &name,
            )
        }
        Command::AttackTrain(cmd) => {
            let a = *cmd;
            commands::attack_train(commands::AttackTrainArgs {
                data: a.data.into(),
                out: a.out.out,
                flow: a.flow,
                classifier: a.classifier,
                seed: a.seed,
                config: a.config,
                epsilon: a.epsilon,
                lr: a.lr,
                steps: a.steps,
                variant: a.variant,
                tau: a.tau,
                n_steps: a.n_steps,
                gamma: a.gamma,
                train_clip: a.train_clip,
                l2_weight: a.l2_weight,
                lora_rank: a.lora_rank,
                targets: a.targets,
                batch_size: a.batch_size,
                optimizer: a.optimizer,
                single_target: a.single_target,
                mask_squares: a.mask_squares,
                mask_side_min: a.mask_side_min,
                mask_side_max: a.mask_side_max,
            })
        }
        Command::AttackSample { data, out, flow, n_samples, target, gamma, noise_seed } => {
            commands::attack_sample(&data.into(), &out.out, &flow, n_samples, target, gamma, noise_seed)
        }
        Command::Eval(cmd) => {
            let e = *cmd;
            commands::eval(commands::EvalArgs {
                data: e.data.into(),
                out: e.out.out,
                flow: e.flow,
                source: e.source,
                victims: e.victims,
                n_eval: e.n_eval,
                gamma: e.gamma,
                noise_seed: e.noise_seed,
                defenses: e.defenses,
                splits: e.splits,
                perturbation_only: e.perturbation_only,
            })
        }
        Command::Ablate { data, out, flows, classifier, victims, steps, gammas, n_eval, noise_seed } => {
            commands::ablate(
                &data.into(),
                &out.out,
                &flows,
                &classifier,
                victims.as_deref(),
                &steps,
                &gammas,
                n_eval,
                noise_seed,
            )
        }
        Command::VerifyMorse { out, problems, grid, flow_time, tol } => {
            commands::verify_morse(&out.out, &problems, grid, flow_time, tol)
        }
        Command::VerifyCascade {
            data, out, flow, classifier, samples, lr, tau, n_steps, t_index, tol, seed,
        } => commands::verify_cascade(
            &data.into(),
            &out.out,
            &flow,
            &classifier,
            samples,
            lr,
            tau,
            n_steps,
            t_index,
            tol,
            seed,
        ),
        Command::Viz { data, out, flow, index, target, gamma, noise_seed } => {
            commands::viz(&data.into(), &out.out, &flow, index, target, gamma, noise_seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

impl From<DataArgs> for commands::DataSpec {
    fn from(d: DataArgs) -> Self {
        commands::DataSpec { path: d.data, dataset: d.dataset, n: d.n, seed: d.data_seed }
    }
}
