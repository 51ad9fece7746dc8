//! `air`: train, evaluate and apply attention-based registration models.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use air_core::attention::TransformerConfig;
use air_core::dataio::{load_dataset_dir, sample_pairs, ImagePair, LabeledDataset, PairingMode};
use air_core::embed::PositionalEncoding;
use air_core::eval::{evaluate, export_grid, read_pgm, warp_pairs, write_pgm, DiceKind, EvalOptions, MetricsReport};
use air_core::train::{fit, forward, load_checkpoint, save_checkpoint, ArchConfig, LossKind, TrainConfig, TrainState};
use air_core::{AirError, Exec};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

const LOCK_NAME: &str = ".air.lock";

#[derive(Debug, Parser)]
#[command(
    name = "air",
    version,
    about = "Attention-based unsupervised deformable registration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write one checkpoint per epoch plus best.airckpt.
    Train(TrainArgs),
    /// Score a checkpoint on the test split and write a JSON report.
    Eval(EvalArgs),
    /// Warp one moving PGM onto one fixed PGM.
    Register(RegisterArgs),
    /// Write a fixed/moving/warped tile of test pairs as a PGM.
    ExportGrid(GridArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory holding `*images-idx3-ubyte[.gz]` and matching label files.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint instead of initializing.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Patch sizes, comma separated; one entry trains the single-scale model.
    #[arg(long, value_delimiter = ',', default_value = "2,7,14")]
    scales: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    /// Feedforward hidden width; defaults to 4 × dim.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, value_parser = parse_positional, default_value = "learned")]
    positional: PositionalEncoding,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_eps: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_pairing, default_value = "same-class")]
    pairing: PairingMode,
    #[arg(long, value_parser = parse_loss, default_value = "mse")]
    loss: LossKind,
    #[arg(long, default_value_t = 0.0)]
    smooth_weight: f64,
    /// Training pairs drawn per epoch.
    #[arg(long, default_value_t = 10_000)]
    pairs: usize,
    #[arg(long, default_value_t = 0.05)]
    val_fraction: f64,
    #[arg(long, default_value_t = 500)]
    val_pairs: usize,
    /// Run every pair on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report path; the report is also printed to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the evaluation pairs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    pairs: usize,
    #[arg(long, value_parser = parse_pairing, default_value = "same-class")]
    pairing: PairingMode,
    #[arg(long, value_parser = parse_dice, default_value = "soft")]
    dice: DiceKind,
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// Warped image path; the field goes next to it with extension `airfld`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    #[arg(long, value_parser = parse_pairing, default_value = "same-class")]
    pairing: PairingMode,
}

fn parse_pairing(s: &str) -> Result<PairingMode, String> {
    s.parse().map_err(|e: AirError| e.to_string())
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: AirError| e.to_string())
}

fn parse_dice(s: &str) -> Result<DiceKind, String> {
    s.parse().map_err(|e: AirError| e.to_string())
}

fn parse_positional(s: &str) -> Result<PositionalEncoding, String> {
    match s {
        "learned" => Ok(PositionalEncoding::Learned),
        "sinusoidal" => Ok(PositionalEncoding::Sinusoidal),
        other => Err(format!("unknown positional encoding {other:?}")),
    }
}

/// Argument-level failure: reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    fn acquire(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_NAME);
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("{} is locked by another run ({})", dir.display(), path.display()))?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn echo(value: &serde_json::Value) -> anyhow::Result<()> {
    eprintln!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("AIR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("AIR_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// Records are split 80/20 with the training seed, so evaluation sees
/// exactly the records training never did.
fn load_split(data: &Path, seed: u64) -> anyhow::Result<(LabeledDataset, LabeledDataset)> {
    let full = load_dataset_dir(data).with_context(|| format!("loading {}", data.display()))?;
    Ok(full.train_test_split(seed))
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let mut transformer = TransformerConfig::new(args.dim, args.heads, args.blocks).map_err(usage)?;
    if let Some(h) = args.hidden {
        transformer.hidden = h;
    }
    let config = TrainConfig {
        learning_rate: args.lr,
        adam_beta1: args.beta1,
        adam_beta2: args.beta2,
        adam_epsilon: args.adam_eps,
        batch_size: args.batch,
        epochs: args.epochs,
        dropout: args.dropout,
        seed: args.seed,
        pairing_mode: args.pairing,
        loss: args.loss,
        smoothness_weight: args.smooth_weight,
        pairs_per_epoch: args.pairs,
        validation_fraction: args.val_fraction,
        validation_pairs: args.val_pairs,
    };
    config.validate().map_err(usage)?;

    let full = load_dataset_dir(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let mut state = match &args.checkpoint {
        Some(path) => {
            let mut s = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            s.config.epochs = args.epochs;
            s
        }
        None => {
            let first = full.images().first().ok_or(AirError::EmptyDataset)?;
            let arch = ArchConfig {
                height: first.height(),
                width: first.width(),
                scales: args.scales.clone(),
                transformer,
                positional: args.positional,
            };
            arch.validate().map_err(usage)?;
            TrainState::new(arch, config).map_err(usage)?
        }
    };
    let exec = exec(args.sequential);
    echo(&json!({
        "command": "train",
        "data": args.data,
        "out": args.out,
        "resume": args.checkpoint,
        "exec": format!("{exec:?}"),
        "architecture": state.params.arch(),
        "train": state.config,
        "start_epoch": state.epoch,
    }))?;

    let _lock = DirLock::acquire(&args.out)?;
    let (train_split, _) = full.train_test_split(state.config.seed);
    if state.epoch == 0 {
        save_checkpoint(args.out.join("epoch-0000.airckpt"), &state)?;
    }
    let out = args.out.clone();
    let report = fit(&train_split, &mut state, exec, |s, stats| {
        save_checkpoint(out.join(format!("epoch-{:04}.airckpt", s.epoch)), s)?;
        let val = stats.validation_mse.map_or("-".into(), |v| format!("{v:.6}"));
        println!(
            "epoch {:4}  loss {:.6}  batches {}  val_mse {}",
            stats.epoch, stats.mean_loss, stats.batches, val
        );
        Ok(())
    })?;
    let mut best = state.clone();
    best.params = report.best_params;
    save_checkpoint(args.out.join("best.airckpt"), &best)?;
    match report.best_epoch {
        Some(e) => println!("best epoch {e}"),
        None => println!("no validation slice; best.airckpt holds the final parameters"),
    }
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let state = load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let options = EvalOptions {
        pairs: args.pairs,
        seed: args.seed,
        pairing_mode: args.pairing,
        dice: args.dice,
    };
    if options.pairs < 2 {
        return Err(usage("--pairs must be at least 2"));
    }
    let exec = exec(args.sequential);
    echo(&json!({
        "command": "eval",
        "checkpoint": args.checkpoint,
        "data": args.data,
        "out": args.out,
        "exec": format!("{exec:?}"),
        "split_seed": state.config.seed,
        "options": options,
    }))?;
    let _lock = match &args.out {
        Some(p) => Some(DirLock::acquire(&parent_dir(p))?),
        None => None,
    };
    let (_, test) = load_split(&args.data, state.config.seed)?;
    let metrics = evaluate(&state.params, &test, &options, exec)?;
    let json = MetricsReport::new(&metrics, state.params.arch(), &options)?.to_json()?;
    if let Some(p) = &args.out {
        fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{json}");
    Ok(())
}

fn register(args: RegisterArgs) -> anyhow::Result<()> {
    let state = load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let field_path = args.out.with_extension("airfld");
    echo(&json!({
        "command": "register",
        "checkpoint": args.checkpoint,
        "fixed": args.fixed,
        "moving": args.moving,
        "out": args.out,
        "field": field_path,
    }))?;
    let fixed = read_pgm(&args.fixed).with_context(|| format!("reading {}", args.fixed.display()))?;
    let moving = read_pgm(&args.moving).with_context(|| format!("reading {}", args.moving.display()))?;
    let arch = state.params.arch();
    for (name, img) in [("fixed", &fixed), ("moving", &moving)] {
        if (img.height(), img.width()) != (arch.height, arch.width) {
            bail!(
                "{name} image is {}x{}, the model was trained at {}x{}",
                img.height(),
                img.width(),
                arch.height,
                arch.width
            );
        }
    }
    let _lock = DirLock::acquire(&parent_dir(&args.out))?;
    let pair = ImagePair {
        fixed: &fixed,
        moving: &moving,
        pairing_mode: state.config.pairing_mode,
    };
    let out = forward(&pair, &state.params, None)?;
    write_pgm(&args.out, &out.warped)?;
    out.field.save(&field_path)?;
    Ok(())
}

fn export(args: GridArgs) -> anyhow::Result<()> {
    let state = load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    if args.pairs == 0 {
        return Err(usage("--pairs must be positive"));
    }
    echo(&json!({
        "command": "export-grid",
        "checkpoint": args.checkpoint,
        "data": args.data,
        "out": args.out,
        "seed": args.seed,
        "pairs": args.pairs,
        "pairing": args.pairing,
        "split_seed": state.config.seed,
    }))?;
    let _lock = DirLock::acquire(&parent_dir(&args.out))?;
    let (_, test) = load_split(&args.data, state.config.seed)?;
    let pairs = sample_pairs(&test, args.pairs, args.pairing, args.seed)?;
    let warped = warp_pairs(&state.params, &pairs, Exec::Parallel)?;
    export_grid(&pairs, &warped, &args.out)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Register(a) => register(a),
        Command::ExportGrid(a) => export(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
