//! Command-line entry point: train / eval / transfer / gradcam / augment /
//! synth, all reproducible from a single --seed.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rcmnet::data::{self, PreparedDataset, SplitSpec};
use rcmnet::error::{Error, Result};
use rcmnet::gradcam::{self, Score};
use rcmnet::model::{Arch, ModelGraph};
use rcmnet::train::{self, Freeze, Metrics, TrainConfig};

#[derive(Parser)]
#[command(name = "rcmnet", about = "ResNet18 + CBAM + MHSA classifier pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory-per-class NetPBM dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint, writing metrics JSON.
    Eval(EvalArgs),
    /// Fine-tune the classifier of a pretrained checkpoint on new data.
    Transfer(TransferArgs),
    /// Compute a Grad-CAM heatmap for one image.
    Gradcam(GradcamArgs),
    /// Expand a dataset 6x with rotations and flips.
    Augment(AugmentArgs),
    /// Generate a deterministic synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Optional `key = value` config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    side: Option<usize>,
    /// Base channel width (64 = full-size model).
    #[arg(long)]
    width: Option<usize>,
    /// Truncate every class to the smallest class before splitting.
    #[arg(long)]
    balance: bool,
    /// Apply the 6x rotation/flip expansion before the train/test split.
    #[arg(long)]
    augment: bool,
    /// With --augment: split first, then expand only the training half
    /// (leakage-free variant).
    #[arg(long)]
    split_then_augment: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch CSV curve log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    metrics: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    balance: bool,
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    split_then_augment: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long = "class")]
    class: usize,
    /// Hooked stage; defaults to the last feature stage before pooling.
    #[arg(long)]
    layer: Option<String>,
    /// Explain the post-softmax probability instead of the logit.
    #[arg(long)]
    probability: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long)]
    side: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let first = e.to_string().lines().next().unwrap_or("bad usage").to_string();
            eprintln!("error: config: {first}");
            return ExitCode::from(2);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::Gradcam(args) => cmd_gradcam(args),
        Command::Augment(args) => cmd_augment(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

/// `key = value` lines, '#' comments, UTF-8. Unknown keys are a hard error
/// against the allowed set of the subcommand.
fn read_config_file(path: &Path, allowed: &[&str]) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected 'key = value'", path.display(), lineno + 1))
        })?;
        let key = key.trim().to_string();
        if !allowed.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "{}:{}: unknown key '{key}'",
                path.display(),
                lineno + 1
            )));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn parsed<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("bad value '{v}' for key '{key}'"))),
    }
}

const TRAIN_KEYS: &[&str] = &[
    "data", "arch", "classes", "epochs", "batch", "lr", "momentum", "weight_decay", "seed",
    "side", "width", "out", "log", "metrics", "pretrained",
];

struct DatasetOptions {
    balance: bool,
    augment: bool,
    split_then_augment: bool,
    seed: u64,
    side: usize,
}

/// Ingest, optionally balance, optionally 6x-augment, split 80/20, preprocess.
fn prepare_splits(root: &Path, opts: &DatasetOptions) -> Result<(PreparedDataset, PreparedDataset)> {
    let (mut ds, problems) = data::load_dataset(root)?;
    for p in problems {
        eprintln!("warning: skipped {p}");
    }
    if opts.balance {
        ds = data::balance_classes(&ds, opts.seed)?;
    }
    let spec = SplitSpec {
        train_fraction: 0.8,
        seed: opts.seed,
    };
    let (train_raw, test_raw) = if opts.augment && !opts.split_then_augment {
        let expanded = data::augment(&ds)?;
        data::split_train_test(&expanded, &spec)?
    } else if opts.augment {
        let (tr, te) = data::split_train_test(&ds, &spec)?;
        (data::augment(&tr)?, te)
    } else {
        data::split_train_test(&ds, &spec)?
    };
    Ok((
        data::preprocess(&train_raw, opts.side),
        data::preprocess(&test_raw, opts.side),
    ))
}

fn write_metrics(path: &Path, metrics: &Metrics) -> Result<()> {
    let json = serde_json::to_string_pretty(metrics).expect("metrics serialize");
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => read_config_file(p, TRAIN_KEYS)?,
        None => HashMap::new(),
    };
    let data_dir = args
        .data
        .or(parsed::<PathBuf>(&file, "data")?)
        .ok_or_else(|| Error::Config("missing --data".into()))?;
    let out = args
        .out
        .or(parsed::<PathBuf>(&file, "out")?)
        .ok_or_else(|| Error::Config("missing --out".into()))?;
    let arch_name = args.arch.or(file.get("arch").cloned()).unwrap_or_else(|| "rcmnet".into());
    let arch = Arch::parse(&arch_name)?;
    let cfg = TrainConfig {
        arch,
        num_classes: args.classes.or(parsed(&file, "classes")?).unwrap_or(2),
        input_side: args.side.or(parsed(&file, "side")?).unwrap_or(64),
        epochs: args.epochs.or(parsed(&file, "epochs")?).unwrap_or(30),
        batch_size: args.batch.or(parsed(&file, "batch")?).unwrap_or(32),
        lr: args.lr.or(parsed(&file, "lr")?).unwrap_or(0.01),
        momentum: args.momentum.or(parsed(&file, "momentum")?).unwrap_or(0.9),
        weight_decay: args.weight_decay.or(parsed(&file, "weight_decay")?).unwrap_or(1e-4),
        seed: args.seed.or(parsed(&file, "seed")?).unwrap_or(0),
        freeze: Freeze::None,
    };
    let width = args.width.or(parsed(&file, "width")?).unwrap_or(64);
    let log = args.log.or(parsed::<PathBuf>(&file, "log")?);
    let metrics_path = args.metrics.or(parsed::<PathBuf>(&file, "metrics")?);

    print_variant_note(arch);
    let opts = DatasetOptions {
        balance: args.balance,
        augment: args.augment,
        split_then_augment: args.split_then_augment,
        seed: cfg.seed,
        side: cfg.input_side,
    };
    let (train_ds, test_ds) = prepare_splits(&data_dir, &opts)?;
    if train_ds.class_names.len() != cfg.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes but --classes is {}",
            train_ds.class_names.len(),
            cfg.num_classes
        )));
    }
    let model = ModelGraph::build_scaled(arch, cfg.num_classes, cfg.input_side, cfg.seed, width)?;
    let (metrics, records) = train::train(&model, &train_ds, &test_ds, &cfg)?;
    model.save_checkpoint(&out)?;
    if let Some(log) = log {
        fs::write(&log, train::curves_csv(&records)).map_err(|e| Error::io(&log, e))?;
    }
    if let Some(p) = metrics_path {
        write_metrics(&p, &metrics)?;
    }
    println!(
        "trained {} for {} epochs: test top-1 {:.4}, checkpoint {}",
        arch.id(),
        cfg.epochs,
        metrics.top1,
        out.display()
    );
    Ok(())
}

fn print_variant_note(arch: Arch) {
    if matches!(arch, Arch::ResNet18C | Arch::ResNet18M) {
        println!("note: variant naming follows the ablation table: resnet18-c = CBAM in every residual block, resnet18-m = trailing BoT/MHSA stage");
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = ModelGraph::load_checkpoint(&args.model)?;
    let (ds, problems) = data::load_dataset(&args.data)?;
    for p in problems {
        eprintln!("warning: skipped {p}");
    }
    let prepared = data::preprocess(&ds, model.input_side);
    let metrics = train::evaluate(&model, &prepared)?;
    write_metrics(&args.metrics, &metrics)?;
    println!(
        "evaluated {} samples: top-1 {:.4}, top-{} {:.4}",
        prepared.samples.len(),
        metrics.top1,
        metrics.k,
        metrics.topk
    );
    Ok(())
}

fn cmd_transfer(args: TransferArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => read_config_file(p, TRAIN_KEYS)?,
        None => HashMap::new(),
    };
    let pretrained = args
        .pretrained
        .or(parsed::<PathBuf>(&file, "pretrained")?)
        .ok_or_else(|| Error::Config("missing --pretrained".into()))?;
    let data_dir = args
        .data
        .or(parsed::<PathBuf>(&file, "data")?)
        .ok_or_else(|| Error::Config("missing --data".into()))?;
    let out = args
        .out
        .or(parsed::<PathBuf>(&file, "out")?)
        .ok_or_else(|| Error::Config("missing --out".into()))?;
    let header = rcmnet::model::read_checkpoint_header(&pretrained)?;
    let cfg = TrainConfig {
        arch: header.arch,
        num_classes: args.classes.or(parsed(&file, "classes")?).unwrap_or(2),
        input_side: 0, // taken from the checkpoint below
        epochs: args.epochs.or(parsed(&file, "epochs")?).unwrap_or(20),
        batch_size: args.batch.or(parsed(&file, "batch")?).unwrap_or(32),
        lr: args.lr.or(parsed(&file, "lr")?).unwrap_or(0.01),
        momentum: args.momentum.or(parsed(&file, "momentum")?).unwrap_or(0.9),
        weight_decay: args.weight_decay.or(parsed(&file, "weight_decay")?).unwrap_or(1e-4),
        seed: args.seed.or(parsed(&file, "seed")?).unwrap_or(0),
        freeze: Freeze::Backbone,
    };
    // Probe the checkpoint for the input side before loading the full model.
    let probe = ModelGraph::load_checkpoint(&pretrained)?;
    let opts = DatasetOptions {
        balance: args.balance,
        augment: args.augment,
        split_then_augment: args.split_then_augment,
        seed: cfg.seed,
        side: probe.input_side,
    };
    let (train_ds, test_ds) = prepare_splits(&data_dir, &opts)?;
    if train_ds.class_names.len() != cfg.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes but --classes is {}",
            train_ds.class_names.len(),
            cfg.num_classes
        )));
    }
    let (model, metrics, records) =
        train::transfer_learn(&pretrained, cfg.num_classes, &train_ds, &test_ds, &cfg)?;
    model.save_checkpoint(&out)?;
    if let Some(log) = &args.log {
        fs::write(log, train::curves_csv(&records)).map_err(|e| Error::io(log, e))?;
    }
    if let Some(p) = &args.metrics {
        write_metrics(p, &metrics)?;
    }
    println!(
        "transferred {} to {} classes: test top-1 {:.4}, checkpoint {}",
        cfg.arch.id(),
        cfg.num_classes,
        metrics.top1,
        out.display()
    );
    Ok(())
}

fn cmd_gradcam(args: GradcamArgs) -> Result<()> {
    let model = ModelGraph::load_checkpoint(&args.model)?;
    let bytes = fs::read(&args.image).map_err(|e| Error::io(&args.image, e))?;
    let raster = data::decode_netpbm(&bytes)?;
    let image = data::preprocess_image(&raster, model.input_side);
    let layer = args
        .layer
        .unwrap_or_else(|| gradcam::default_layer(&model).to_string());
    let score = if args.probability {
        Score::Probability
    } else {
        Score::Logit
    };
    let result = gradcam::compute_gradcam(&model, &image, args.class, &layer, score)?;
    gradcam::export_heatmap(&result, &args.out)?;
    println!(
        "gradcam class {} at {}: map {}x{}, heatmap {}",
        result.target_class,
        result.layer,
        result.map_height,
        result.map_width,
        args.out.display()
    );
    Ok(())
}

fn cmd_augment(args: AugmentArgs) -> Result<()> {
    let (n_in, n_out) = data::augment_directory(&args.input, &args.out)?;
    println!("augmented {n_in} images into {n_out}");
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let ds = data::synth_generate(args.classes, args.per_class, args.side, args.seed)?;
    let written = data::save_dataset(&ds, &args.out)?;
    println!(
        "wrote {written} synthetic images across {} classes to {}",
        args.classes,
        args.out.display()
    );
    Ok(())
}
