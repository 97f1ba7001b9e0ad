//! `segmatch` command-line entry point: `synth`, `split`, `train`, `eval`.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime and numeric failures.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use segmatch::consistency::{Variant, VariantConfig};
use segmatch::data::{
    load_image, load_mask, make_splits, read_split_file, synth_dataset, write_split_files, DatasetIndex, LabeledCount,
    SplitProtocol, SplitSpec,
};
use segmatch::eval::{default_stride, evaluate, EvalMode, EvalReport};
use segmatch::model::load_checkpoint;
use segmatch::tensor::{ImageTensor, LabelMask};
use segmatch::train::{init_model, run_training, OhemConfig, TrainConfig, TrainData, TrainOutputs};

use manifest::RunManifest;

const OUTPUT_ROOT_ENV: &str = "SEGMATCH_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "segmatch", version, about = "Semi-supervised semantic segmentation by weak-to-strong consistency")]
struct Cli {
    /// Default parent directory for outputs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    Synth(SynthArgs),
    /// Write labeled/unlabeled split files.
    Split(SplitArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory [default: <output-root>/synth].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 520)]
    items: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Number of classes including the background.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Number of labeled items.
    #[arg(long, conflicts_with = "fraction")]
    n_labeled: Option<usize>,
    /// Fraction of items to label, e.g. 0.0625.
    #[arg(long)]
    fraction: Option<f64>,
    /// original_only, blended, prioritized_high_quality or fraction.
    #[arg(long, default_value = "blended")]
    protocol: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Needed only when the dataset has no index.json.
    #[arg(long)]
    classes: Option<usize>,
    /// Split directory [default: <data>/splits].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory holding labeled.txt and unlabeled.txt [default: <data>/splits].
    #[arg(long)]
    splits: Option<PathBuf>,
    /// TOML config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory [default: <output-root>/train].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
    /// Resets stream counts to the variant's preset.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    image_streams: Option<usize>,
    #[arg(long)]
    feature_streams: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_l: Option<usize>,
    #[arg(long)]
    batch_u: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Disable strong photometric augmentation and CutMix.
    #[arg(long)]
    no_strong: bool,
    /// Use OHEM on the supervised loss with this threshold.
    #[arg(long)]
    ohem_thresh: Option<f64>,
    #[arg(long, requires = "ohem_thresh")]
    ohem_min_kept: Option<usize>,
    /// Stop after this many steps.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split file with "image mask" lines [default: every annotated item].
    #[arg(long)]
    split: Option<PathBuf>,
    /// Sliding-window size; whole-image inference when omitted.
    #[arg(long)]
    window: Option<usize>,
    /// Window stride [default: two thirds of the window].
    #[arg(long, requires = "window")]
    stride: Option<usize>,
    /// Report path [default: <checkpoint dir>/eval.json].
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error raised for bad input, mapped to exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<segmatch::Error>() {
        Some(segmatch::Error::Argument(_) | segmatch::Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(&cli, a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn is_non_empty_dir(path: &Path) -> bool {
    std::fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Creates `dir`, clearing it first when `overwrite` is set.
fn prepare_out_dir(dir: &Path, overwrite: bool) -> anyhow::Result<()> {
    if is_non_empty_dir(dir) {
        if !overwrite {
            return Err(usage(format!("{} is not empty; pass --overwrite to replace it", dir.display())));
        }
        std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> anyhow::Result<()> {
    if a.classes < 2 {
        return Err(usage(format!("--classes must be >= 2, got {}", a.classes)));
    }
    let out = a.out.clone().unwrap_or_else(|| cli.output_root.join("synth"));
    prepare_out_dir(&out, a.overwrite)?;
    let index = synth_dataset(&out, a.items, a.size, a.classes, a.seed)?;
    let hq = index.items.iter().filter(|i| i.high_quality).count();
    println!(
        "wrote {} items ({}x{}, {} classes, {} high-quality) to {}",
        index.len(),
        a.size,
        a.size,
        a.classes,
        hq,
        out.display()
    );
    Ok(())
}

fn cmd_split(a: &SplitArgs) -> anyhow::Result<()> {
    let index = DatasetIndex::open(&a.data, a.classes)?;
    let protocol: SplitProtocol = a.protocol.parse()?;
    let n_labeled = match (a.n_labeled, a.fraction) {
        (Some(n), None) => LabeledCount::Count(n),
        (None, Some(f)) => LabeledCount::Fraction(f),
        _ => return Err(usage("give exactly one of --n-labeled or --fraction")),
    };
    let spec = SplitSpec {
        protocol,
        n_labeled,
        seed: a.seed,
    };
    let split = make_splits(&index, &spec)?;
    let out = a.out.clone().unwrap_or_else(|| a.data.join("splits"));
    write_split_files(&index, &split, &out)?;
    println!(
        "{} labeled / {} unlabeled written to {}",
        split.labeled.len(),
        split.unlabeled.len(),
        out.display()
    );
    Ok(())
}

fn load_labeled(root: &Path, entries: &[(String, Option<String>)], k: usize) -> anyhow::Result<Vec<(ImageTensor, LabelMask)>> {
    entries
        .iter()
        .map(|(img, mask)| {
            let mask = mask.as_ref().ok_or_else(|| usage(format!("labeled entry {img} has no mask")))?;
            let m = load_mask(&root.join(mask))?;
            m.validate(k)?;
            Ok((load_image(&root.join(img))?, m))
        })
        .collect()
}

/// Config file first, then command-line flags.
fn effective_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_toml_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = &a.variant {
        let variant: Variant = v.parse()?;
        let preset = VariantConfig::preset(variant);
        cfg.variant.variant = variant;
        cfg.variant.n_image_streams = preset.n_image_streams;
        cfg.variant.n_feature_streams = preset.n_feature_streams;
    }
    let v = &mut cfg.variant;
    v.tau = a.tau.unwrap_or(v.tau);
    v.lambda = a.lambda.unwrap_or(v.lambda);
    v.mu = a.mu.unwrap_or(v.mu);
    v.n_image_streams = a.image_streams.unwrap_or(v.n_image_streams);
    v.n_feature_streams = a.feature_streams.unwrap_or(v.n_feature_streams);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.total_epochs = a.epochs.unwrap_or(cfg.total_epochs);
    cfg.base_lr = a.lr.unwrap_or(cfg.base_lr);
    cfg.batch_l = a.batch_l.unwrap_or(cfg.batch_l);
    cfg.batch_u = a.batch_u.unwrap_or(cfg.batch_u);
    cfg.train_size = a.train_size.unwrap_or(cfg.train_size);
    cfg.checkpoint_every = a.checkpoint_every.unwrap_or(cfg.checkpoint_every);
    if a.no_strong {
        cfg.augment.strong = false;
    }
    if let Some(thresh) = a.ohem_thresh {
        cfg.ohem = Some(OhemConfig {
            thresh,
            min_kept: a.ohem_min_kept,
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let started = chrono::Utc::now();
    let mut cfg = effective_config(a)?;
    let index = DatasetIndex::open(&a.data, Some(cfg.model.num_classes))?;
    cfg.model.num_classes = index.num_classes;
    let splits = a.splits.clone().unwrap_or_else(|| a.data.join("splits"));
    let labeled_list = read_split_file(&splits.join("labeled.txt"))?;
    let unlabeled_list = read_split_file(&splits.join("unlabeled.txt"))?;
    let labeled = load_labeled(&a.data, &labeled_list, index.num_classes)?;
    let unlabeled = unlabeled_list
        .iter()
        .map(|(img, _)| load_image(&a.data.join(img)))
        .collect::<segmatch::Result<Vec<_>>>()?;
    if labeled.is_empty() {
        bail!(usage("labeled split is empty"));
    }
    if unlabeled.is_empty() {
        bail!(usage("unlabeled split is empty"));
    }

    let out = a.out.clone().unwrap_or_else(|| cli.output_root.join("train"));
    prepare_out_dir(&out, a.overwrite)?;
    let mut manifest = RunManifest::start(&cfg, started)?;
    manifest.write(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string()?).context("writing config.toml")?;

    log::info!(
        "training {} on {} labeled / {} unlabeled, config {}",
        cfg.variant.variant,
        labeled.len(),
        unlabeled.len(),
        &manifest.config_hash[..12]
    );
    let mut model = init_model(&cfg)?;
    let result = run_training(
        &cfg,
        &TrainData {
            labeled: &labeled,
            unlabeled: &unlabeled,
        },
        &mut model,
        &TrainOutputs {
            dir: Some(out.clone()),
            max_steps: a.max_steps,
        },
    );
    manifest.finish(match &result {
        Ok(_) => "completed".into(),
        Err(e) => format!("failed: {e}"),
    });
    manifest.write(&out)?;
    let report = result?;
    if let Some(last) = report.records.last() {
        println!(
            "{} steps, final loss {:.4} (sup {:.4}, unsup {:.4}), mask ratio {:.3}",
            report.records.len(),
            last.loss_total,
            last.loss_s,
            last.loss_u,
            last.mask_ratio
        );
    }
    if let Some(ckpt) = report.checkpoint {
        println!("checkpoint: {}", ckpt.display());
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    if !a.checkpoint.exists() {
        bail!(usage(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    let (model, meta) = load_checkpoint(&a.checkpoint)?;
    let index = DatasetIndex::open(&a.data, Some(model.num_classes()))?;
    let entries = match &a.split {
        Some(path) => read_split_file(path)?,
        None => index.items.iter().filter(|i| i.mask.is_some()).map(|i| (i.image.clone(), i.mask.clone())).collect(),
    };
    let items = load_labeled(&a.data, &entries, model.num_classes())?;
    if items.is_empty() {
        bail!(usage("nothing to evaluate"));
    }
    let mode = match a.window {
        Some(window) => EvalMode::SlidingWindow {
            window,
            stride: a.stride.unwrap_or_else(|| default_stride(window)),
        },
        None => EvalMode::Whole,
    };
    let cm = evaluate(&model, &items, mode)?;
    let mut report = EvalReport::from_confusion(cm, mode, items.len())?;
    let meta_json = serde_json::to_value(&meta)?;
    report.metadata.insert("checkpoint".into(), a.checkpoint.display().to_string().into());
    report.metadata.insert("checkpoint_meta".into(), meta_json);
    report.metadata.insert("evaluated_at".into(), chrono::Utc::now().to_rfc3339().into());
    report.metadata.insert("version".into(), manifest::version().into());
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint.parent().map(|p| p.join("eval.json")).unwrap_or_else(|| PathBuf::from("eval.json"))
    });
    std::fs::write(&out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    for row in &report.classes {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v));
        println!("class {:>3}  iou {}  dice {}", row.class, fmt(row.iou), fmt(row.dice));
    }
    println!("mIoU {:.4}  accuracy {:.4}  ({} items)", report.mean_iou, report.overall_accuracy, report.num_items);
    println!("report: {}", out.display());
    Ok(())
}
