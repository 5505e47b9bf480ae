use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rlstm::autograd::grad_check;
use rlstm::model::{load_checkpoint, save_checkpoint, BnTrainStats, Branches, Model, ModelConfig, Pass};
use rlstm::nonlocal::Normalizer;
use rlstm::synthdata::{
    build_split, class_names, generate, interaction_classes, read_manifest, trajectory_classes, write_manifest,
    write_raw, DatasetConfig, ManifestEntry, Modality, Split,
};
use rlstm::train::{evaluate, train_stream, EpochRecord, TrainConfig, TrainOutcome};
use rlstm::{Error, Tensor};
use serde_json::json;

/// Relational LSTM video classifier on synthetic clips.
#[derive(Parser)]
#[command(name = "rlstm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset description and train/test manifests.
    GenData(GenDataArgs),
    /// Train one stream and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate one or two stream checkpoints, fusing their scores.
    Eval(EvalArgs),
    /// Finite-difference gradient check of the full model on a tiny config.
    GradCheck(GradCheckArgs),
    /// Train with a branch selection over several seeds and compare to the two-branch model.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// approach, recede, orbit and three static markers
    Interaction,
    /// line, out-and-back, loop and corner paths
    Trajectory,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "interaction")]
    preset: Preset,
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    /// Frames per clip.
    #[arg(long, default_value_t = 16)]
    length: usize,
    #[arg(long, default_value_t = 32)]
    frame_size: usize,
    /// Uniform pixel noise amplitude in 1/256 steps.
    #[arg(long, default_value_t = 8)]
    noise: i64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also dump every clip as a raw f64 file under `<out>/raw`.
    #[arg(long)]
    raw: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stream {
    Appearance,
    Motion,
}

impl From<Stream> for Modality {
    fn from(s: Stream) -> Modality {
        match s {
            Stream::Appearance => Modality::Appearance,
            Stream::Motion => Modality::Motion,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Both,
    Local,
    Nonlocal,
}

impl From<BranchArg> for Branches {
    fn from(b: BranchArg) -> Branches {
        match b {
            BranchArg::Both => Branches::Both,
            BranchArg::Local => Branches::Local,
            BranchArg::Nonlocal => Branches::Nonlocal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BnTrainArg {
    Batch,
    Moving,
}

#[derive(Args, Clone)]
struct FitArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "appearance")]
    stream: Stream,
    #[arg(long, default_value_t = 8)]
    segments: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.0005)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0005)]
    weight_decay: f64,
    /// Drop probability before the classifier head.
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 0.1)]
    bn_momentum: f64,
    /// Statistics used by batch norm while training.
    #[arg(long, value_enum, default_value = "batch")]
    bn_train: BnTrainArg,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Comma-separated epochs at which the learning rate is multiplied by `lr-factor`.
    #[arg(long, value_delimiter = ',', default_values_t = vec![20, 26])]
    milestones: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    lr_factor: f64,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    conv_channels: usize,
    /// Attention normaliser inside the relational cells.
    #[arg(long, default_value = "softmax")]
    normalizer: String,
    /// Inference groups for held-out evaluation.
    #[arg(long, default_value_t = 4)]
    groups: usize,
    /// Evaluate the test split every N epochs (0 = end of training only).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    /// Clip the gradient to this global L2 norm before each step.
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, value_enum, default_value = "both")]
    branch: BranchArg,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log (defaults to `<out>.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Final metrics JSON (defaults to `<out>.json`).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Appearance-stream checkpoint.
    #[arg(long)]
    spatial: Option<PathBuf>,
    /// Motion-stream checkpoint.
    #[arg(long)]
    temporal: Option<PathBuf>,
    /// Weight of the spatial stream.
    #[arg(long, default_value_t = 0.5)]
    fusion_weight: f64,
    #[arg(long, default_value_t = 4)]
    groups: usize,
    /// Write the metrics JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, value_enum, default_value = "local")]
    branch: BranchArg,
    /// Comma-separated model seeds.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0, 1, 2])]
    seeds: Vec<u64>,
    /// Write the summary JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<u8, Error> {
    let classes = match a.preset {
        Preset::Interaction => interaction_classes(),
        Preset::Trajectory => trajectory_classes(),
    };
    let config = DatasetConfig {
        classes,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        length: a.length,
        frame_size: a.frame_size,
        noise: a.noise,
        seed: a.seed,
    };
    let train = build_split(&config, Split::Train)?;
    let test = build_split(&config, Split::Test)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("dataset.json"), serde_json::to_string_pretty(&config)?)?;
    write_manifest(&a.out.join("train.jsonl"), &train)?;
    write_manifest(&a.out.join("test.jsonl"), &test)?;
    if a.raw {
        let dir = a.out.join("raw");
        std::fs::create_dir_all(&dir)?;
        for e in train.iter().chain(&test) {
            write_raw(&generate(&e.scenario, e.length, e.seed)?, &dir.join(format!("{}.rlsd", e.id)))?;
        }
    }
    println!(
        "{}",
        json!({
            "classes": class_names(&config.classes),
            "train": train.len(),
            "test": test.len(),
            "out": a.out,
        })
    );
    Ok(0)
}

fn load_dataset(dir: &Path) -> Result<DatasetConfig, Error> {
    let path = dir.join("dataset.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_split(dir: &Path, split: SplitArg) -> Result<Vec<ManifestEntry>, Error> {
    let name = match split {
        SplitArg::Train => "train.jsonl",
        SplitArg::Test => "test.jsonl",
    };
    let path = dir.join(name);
    read_manifest(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn configs(fit: &FitArgs, data: &DatasetConfig, branch: Branches, seed: u64) -> Result<(ModelConfig, TrainConfig), Error> {
    let normalizer = match fit.normalizer.as_str() {
        "softmax" => Normalizer::Softmax,
        "uniform" => Normalizer::Uniform,
        other => return Err(Error::Config(format!("unknown normalizer `{other}`"))),
    };
    let model = ModelConfig {
        segments: fit.segments,
        frame_size: data.frame_size,
        conv_channels: fit.conv_channels,
        channels: fit.channels,
        classes: data.classes.len(),
        dropout: fit.dropout,
        bn_momentum: fit.bn_momentum,
        bn_train: match fit.bn_train {
            BnTrainArg::Batch => BnTrainStats::Batch,
            BnTrainArg::Moving => BnTrainStats::Moving,
        },
        fusion_weight: 0.5,
        branches: branch,
        normalizer,
        stream: fit.stream.into(),
        seed,
    };
    model.validate()?;
    let train = TrainConfig {
        epochs: fit.epochs,
        batch_size: fit.batch_size,
        lr: fit.lr,
        momentum: fit.momentum,
        weight_decay: fit.weight_decay,
        milestones: fit.milestones.clone(),
        lr_factor: fit.lr_factor,
        seed,
        eval_every: fit.eval_every,
        groups: fit.groups,
        clip_norm: fit.clip_norm,
    };
    train.validate()?;
    Ok((model, train))
}

fn progress(r: &EpochRecord) {
    eprintln!(
        "epoch {:>3} {:<5} loss {:.4} acc {:.4} lr {:.2e} ({:.1}s)",
        r.epoch, r.split, r.loss, r.accuracy, r.lr, r.wall_time
    );
}

fn fit(fit: &FitArgs, branch: Branches, seed: u64) -> Result<TrainOutcome, Error> {
    let data = load_dataset(&fit.data)?;
    let train = load_split(&fit.data, SplitArg::Train)?;
    let test = load_split(&fit.data, SplitArg::Test)?;
    let (mc, tc) = configs(fit, &data, branch, seed)?;
    train_stream(&mc, &tc, &train, Some(&test), progress)
}

fn train(a: TrainArgs) -> Result<u8, Error> {
    let out = fit(&a.fit, a.branch.into(), a.fit.seed)?;
    save_checkpoint(&out.model, &a.out)?;
    let log = a.log.unwrap_or_else(|| a.out.with_extension("csv"));
    std::fs::write(&log, out.log.to_csv()?)?;
    let summary = json!({
        "checkpoint": a.out,
        "train": out.log.last("train"),
        "test": out.log.last("test"),
        "records": out.log.records,
    });
    let metrics = a.metrics.unwrap_or_else(|| a.out.with_extension("json"));
    std::fs::write(&metrics, serde_json::to_string_pretty(&summary)?)?;
    println!("{}", json!({ "checkpoint": a.out, "test": out.log.last("test") }));
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<u8, Error> {
    if a.spatial.is_none() && a.temporal.is_none() {
        return Err(Error::Config("pass --spatial and/or --temporal".into()));
    }
    let data = load_dataset(&a.data)?;
    let entries = load_split(&a.data, a.split)?;
    let load = |p: &Option<PathBuf>| p.as_deref().map(load_checkpoint).transpose();
    let (spatial, temporal) = (load(&a.spatial)?, load(&a.temporal)?);
    for m in spatial.iter().chain(&temporal) {
        if m.config().classes != data.classes.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} classes, dataset has {}",
                m.config().classes,
                data.classes.len()
            )));
        }
    }
    let e = evaluate(spatial.as_ref(), temporal.as_ref(), &entries, a.fusion_weight, a.groups)?;
    let value = json!({
        "classes": class_names(&data.classes),
        "evaluation": e,
    });
    let text = serde_json::to_string_pretty(&value)?;
    if let Some(out) = &a.out {
        std::fs::write(out, &text)?;
    }
    println!("{text}");
    Ok(0)
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<u8, Error> {
    use rand::{Rng, SeedableRng};
    let cfg = ModelConfig {
        seed: a.seed,
        ..ModelConfig::tiny()
    };
    let model = Model::new(cfg.clone())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed ^ 0x5eed);
    let clips: Vec<Vec<Tensor>> = (0..2)
        .map(|_| {
            (0..cfg.segments)
                .map(|_| Tensor::from_fn(&[cfg.frame_size, cfg.frame_size], |_| rng.gen_range(0.0..1.0)))
                .collect()
        })
        .collect();
    let refs: Vec<&[Tensor]> = clips.iter().map(|c| c.as_slice()).collect();
    let report = grad_check(model.params(), a.step, a.tol, |tape, p| {
        let mut drop = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = model.forward_with(p, tape, &refs, Pass::Train { rng: &mut drop })?;
        let l0 = tape.softmax_cross_entropy(out.scores[0], 0)?;
        let l1 = tape.softmax_cross_entropy(out.scores[1], 2)?;
        tape.add(l0, l1)
    })?;
    println!(
        "{}",
        json!({
            "checked": report.checked,
            "max_rel_error": report.max_rel_error,
            "failures": report.failures.len(),
            "passed": report.passed(),
        })
    );
    Ok(if report.passed() { 0 } else { 3 })
}

fn ablate(a: AblateArgs) -> Result<u8, Error> {
    let variant: Branches = a.branch.into();
    let mut runs = Vec::new();
    let variants: Vec<Branches> = if variant == Branches::Both {
        vec![Branches::Both]
    } else {
        vec![variant, Branches::Both]
    };
    for &b in &variants {
        let mut accs = Vec::new();
        for &seed in &a.seeds {
            let out = fit(&a.fit, b, seed)?;
            let acc = out.log.last("test").map(|r| r.accuracy).unwrap_or(f64::NAN);
            eprintln!("{b:?} seed {seed}: test accuracy {acc:.4}");
            accs.push(acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        runs.push(json!({ "branches": b, "seeds": a.seeds, "accuracy": accs, "mean": mean }));
    }
    let gap = if runs.len() == 2 {
        Some(runs[1]["mean"].as_f64().unwrap_or(f64::NAN) - runs[0]["mean"].as_f64().unwrap_or(f64::NAN))
    } else {
        None
    };
    let value = json!({ "runs": runs, "two_branch_gain": gap });
    let text = serde_json::to_string_pretty(&value)?;
    if let Some(out) = &a.out {
        std::fs::write(out, &text)?;
    }
    println!("{text}");
    Ok(0)
}
