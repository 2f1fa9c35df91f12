//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on data or runtime failure, 2 on usage
//! errors. Logs go to standard error (level from `PROTODETECT_LOG`, default
//! `warn`); machine-readable results go to files only. Every command that
//! writes an output also writes `<output>.config.json` echoing its
//! resolved arguments.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::classifier::{detect_image, DetectOptions, ScoreMode};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_classification, evaluate_detections, ClassFilter, Interpolation, DEFAULT_EVAL_IOU};
use crate::fixture::{generate_fixture, FixtureSpec};
use crate::geometry::DEFAULT_NMS_IOU;
use crate::io::detections::DetectionsFile;
use crate::io::export::{export_prototypes, ExportFormat};
use crate::io::manifest::{self, validate_manifest, ManifestFile};
use crate::io::{protofile, read_json, write_atomic, write_json};
use crate::prototypes::{
    build_background_prototypes, build_object_prototypes, sample_background_crops, ObjectPrototypeOptions,
    DEFAULT_BACKGROUND_K, DEFAULT_CROPS_PER_IMAGE,
};
use crate::trainer::{finetune, Augmentations, BackgroundTargetMode, TrainConfig};
use crate::types::DEFAULT_TEMPERATURE;

pub const LOG_ENV: &str = "PROTODETECT_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "protodetect",
    version,
    about = "Few-shot detection by prototype classification of region proposals"
)]
struct Cli {
    /// Worker threads for per-image work (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Average annotated shots into one prototype per object class.
    BuildPrototypes(BuildPrototypesArgs),
    /// Cluster object-free crops into background prototypes and append them.
    BuildBackground(BuildBackgroundArgs),
    /// Fine-tune prototypes with a cross-entropy objective.
    Finetune(FinetuneArgs),
    /// Classify proposals and write per-image detections.
    Detect(DetectArgs),
    /// Compute per-class AP and mAP for a detections file.
    Evaluate(EvaluateArgs),
    /// Classify ground-truth boxes and report F1 and accuracy.
    ClassifyEval(ClassifyEvalArgs),
    /// Export the prototype matrix with row labels.
    ExportPrototypes(ExportArgs),
    /// Check a manifest and its feature files.
    Validate(ValidateArgs),
    /// Generate a synthetic dataset.
    Fixture(FixtureArgs),
}

#[derive(Debug, Args, Serialize)]
struct BuildPrototypesArgs {
    /// Training-shot manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output `.proto` file.
    #[arg(long)]
    out: PathBuf,
    /// Pool shots with their annotation masks where present.
    #[arg(long)]
    use_masks: bool,
    /// Softmax temperature stored with the prototypes.
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
}

#[derive(Debug, Args, Serialize)]
struct BuildBackgroundArgs {
    /// Manifest whose images supply object-free crops.
    #[arg(long)]
    manifest: PathBuf,
    /// Object prototypes to extend; defaults to the file at `--out`.
    #[arg(long)]
    prototypes: Option<PathBuf>,
    /// Number of background clusters.
    #[arg(long, default_value_t = DEFAULT_BACKGROUND_K)]
    k: usize,
    /// Crops sampled per image.
    #[arg(long, default_value_t = DEFAULT_CROPS_PER_IMAGE)]
    crops_per_image: usize,
    /// Seed for crop sampling and clustering.
    #[arg(long)]
    seed: u64,
    /// Output `.proto` file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct FinetuneArgs {
    /// Training-shot manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Initial prototypes.
    #[arg(long)]
    prototypes: PathBuf,
    /// Training configuration JSON; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of passes over the training images.
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs (zero-based) at which the learning rate is multiplied by 0.1.
    #[arg(long, value_delimiter = ',')]
    lr_drop_epochs: Option<Vec<usize>>,
    /// Softmax temperature for the loss.
    #[arg(long)]
    temperature: Option<f64>,
    /// Background crops sampled per image and epoch.
    #[arg(long)]
    negatives: Option<usize>,
    /// Seed for augmentation, negative sampling and image order.
    #[arg(long)]
    seed: u64,
    /// How negatives pick their background target row.
    #[arg(long, value_enum)]
    background_target: Option<BackgroundTargetMode>,
    /// Keep background rows fixed during training.
    #[arg(long)]
    freeze_background: bool,
    /// Disable flips, rotations and crops.
    #[arg(long)]
    no_augment: bool,
    /// Pool positives with their annotation masks where present.
    #[arg(long)]
    use_masks: bool,
    /// Output `.proto` file.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSON lines `{epoch, loss, acc, lr}`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct DetectArgs {
    /// Manifest listing images and proposals.
    #[arg(long)]
    manifest: PathBuf,
    /// Prototypes to classify against.
    #[arg(long)]
    prototypes: PathBuf,
    /// Per-class suppression IoU threshold.
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms_iou: f64,
    /// Detection score: best object similarity, or its margin over the best background row.
    #[arg(long, value_enum, default_value_t = ScoreMode::Raw)]
    score: ScoreMode,
    /// Suppress overlapping detections regardless of class.
    #[arg(long)]
    class_agnostic_nms: bool,
    /// Output detections JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    /// Detections JSON from `detect`.
    #[arg(long)]
    detections: PathBuf,
    /// Manifest with ground-truth annotations.
    #[arg(long)]
    manifest: PathBuf,
    /// Classes that enter the mean.
    #[arg(long, value_enum, default_value_t = ClassFilter::All)]
    classes: ClassFilter,
    /// IoU needed for a true positive.
    #[arg(long, default_value_t = DEFAULT_EVAL_IOU)]
    iou: f64,
    /// 11-point interpolated AP instead of all-point.
    #[arg(long)]
    voc11: bool,
    /// Output report JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ClassifyEvalArgs {
    /// Manifest with ground-truth annotations.
    #[arg(long)]
    manifest: PathBuf,
    /// Prototypes to classify against.
    #[arg(long)]
    prototypes: PathBuf,
    /// Output report JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ExportArgs {
    /// Prototypes to export.
    #[arg(long)]
    prototypes: PathBuf,
    #[arg(long, value_enum)]
    format: ExportFormat,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ValidateArgs {
    /// Manifest to check.
    #[arg(long)]
    manifest: PathBuf,
    /// Also write the diagnostics as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct FixtureArgs {
    /// Fixture spec JSON; omitted fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the fixture spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the fixture spec's noise level.
    #[arg(long)]
    noise: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct ConfigEcho<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: &'a T,
    #[serde(skip_serializing_if = "Option::is_none")]
    resolved: Option<serde_json::Value>,
}

fn echo_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(OsString::from)
        .unwrap_or_else(|| OsString::from("out"));
    name.push(".config.json");
    out.with_file_name(name)
}

fn write_echo<T: Serialize>(out: &Path, command: &str, args: &T, resolved: Option<serde_json::Value>) -> Result<()> {
    write_json(
        &echo_path(out),
        &ConfigEcho {
            tool: "protodetect",
            version: env!("CARGO_PKG_VERSION"),
            command,
            args,
            resolved,
        },
    )
}

fn echo_value<T: Serialize>(command: &str, args: &T) -> Result<serde_json::Value> {
    Ok(serde_json::json!({ "command": command, "args": serde_json::to_value(args)? }))
}

fn cmd_build_prototypes(a: &BuildPrototypesArgs) -> Result<()> {
    let ds = Dataset::load(&a.manifest)?;
    let protos = build_object_prototypes(
        &ds,
        ObjectPrototypeOptions {
            use_masks: a.use_masks,
            temperature: a.temperature,
        },
    )?;
    protofile::write(&a.out, &protos)?;
    log::info!("wrote {} object prototypes to {}", protos.num_rows(), a.out.display());
    write_echo(&a.out, "build-prototypes", a, None)
}

fn cmd_build_background(a: &BuildBackgroundArgs) -> Result<()> {
    let input = a.prototypes.as_ref().unwrap_or(&a.out);
    let protos = protofile::read(input)?;
    if protos.class_table().num_background() > 0 {
        log::warn!(
            "{} already has {} background rows; replacing them",
            input.display(),
            protos.class_table().num_background()
        );
    }
    let ds = Dataset::load(&a.manifest)?;
    if let Some(d) = ds.dim() {
        crate::pooling::check_dim(protos.dim(), d)?;
    }
    let sampling = sample_background_crops(&ds, a.crops_per_image, a.seed)?;
    let bg = build_background_prototypes(&sampling.crops, a.k, a.seed)?;
    for d in &bg.diagnostics {
        log::warn!("{d}");
    }
    let out = protos.with_background_rows(&bg.rows)?;
    protofile::write(&a.out, &out)?;
    log::info!(
        "wrote {} background prototypes from {} crops to {}",
        bg.rows.len(),
        sampling.crops.len(),
        a.out.display()
    );
    write_echo(
        &a.out,
        "build-background",
        a,
        Some(serde_json::json!({
            "crops": sampling.crops.len(),
            "background_rows": bg.rows.len(),
            "kmeans_iterations": bg.clustering.iterations,
            "inertia": bg.clustering.inertia,
        })),
    )
}

fn train_config(a: &FinetuneArgs) -> Result<TrainConfig> {
    let mut c: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    c.seed = a.seed;
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.lr {
        c.lr = v;
    }
    if let Some(v) = &a.lr_drop_epochs {
        c.lr_drop_epochs = v.clone();
    }
    if let Some(v) = a.temperature {
        c.temperature = v;
    }
    if let Some(v) = a.negatives {
        c.negatives_per_image = v;
    }
    if let Some(v) = a.background_target {
        c.background_target_mode = v;
    }
    c.freeze_background |= a.freeze_background;
    c.use_masks |= a.use_masks;
    if a.no_augment {
        c.augmentations = Augmentations::NONE;
    }
    c.validate()?;
    Ok(c)
}

fn cmd_finetune(a: &FinetuneArgs) -> Result<()> {
    let config = train_config(a)?;
    let init = protofile::read(&a.prototypes)?;
    let ds = Dataset::load(&a.manifest)?;
    let out = finetune(&ds, &init, &config)?;
    if let Some(path) = &a.log {
        let mut buf = Vec::new();
        for e in &out.log {
            serde_json::to_writer(&mut buf, e)?;
            buf.push(b'\n');
        }
        write_atomic(path, &buf)?;
    }
    if let Some(last) = out.log.last() {
        log::info!("final epoch {}: loss {:.6}, acc {:.4}", last.epoch, last.loss, last.acc);
    }
    protofile::write(&a.out, &out.prototypes)?;
    write_echo(&a.out, "finetune", a, Some(serde_json::to_value(&config)?))
}

fn cmd_detect(a: &DetectArgs) -> Result<()> {
    let protos = protofile::read(&a.prototypes)?;
    let ds = Dataset::load(&a.manifest)?;
    let opts = DetectOptions {
        nms_iou: a.nms_iou,
        score_mode: a.score,
        class_agnostic_nms: a.class_agnostic_nms,
    };
    if !(0.0..=1.0).contains(&opts.nms_iou) {
        return Err(Error::Config(format!(
            "nms-iou must lie in [0, 1], got {}",
            opts.nms_iou
        )));
    }
    let per_image = ds
        .manifest
        .entries
        .par_iter()
        .zip(&ds.maps)
        .map(|(e, fm)| Ok((e.image_id.clone(), detect_image(fm, &e.proposals, &protos, &opts)?)))
        .collect::<Result<Vec<_>>>()?;
    DetectionsFile::from_detections(protos.class_table(), &per_image).write(&a.out)?;
    write_echo(&a.out, "detect", a, None)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let m = manifest::load(&a.manifest)?;
    let dets = DetectionsFile::read(&a.detections)?.to_detections(&m.class_table)?;
    let filter = a.classes.class_ids(&m.class_table);
    let interpolation = if a.voc11 {
        Interpolation::Voc11
    } else {
        Interpolation::AllPoint
    };
    let mut report = evaluate_detections(&dets, &m, a.iou, &filter, interpolation)?;
    report.config = echo_value("evaluate", a)?;
    log::info!("mAP@{} ({:?}): {:.4}", a.iou, a.classes, report.map);
    write_json(&a.out, &report)?;
    write_echo(&a.out, "evaluate", a, None)
}

fn cmd_classify_eval(a: &ClassifyEvalArgs) -> Result<()> {
    let protos = protofile::read(&a.prototypes)?;
    let ds = Dataset::load(&a.manifest)?;
    let mut report = evaluate_classification(&ds, &protos)?;
    report.config = echo_value("classify-eval", a)?;
    log::info!("accuracy {:.4}, macro F1 {:.4}", report.accuracy, report.macro_f1);
    write_json(&a.out, &report)?;
    write_echo(&a.out, "classify-eval", a, None)
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let protos = protofile::read(&a.prototypes)?;
    export_prototypes(&protos, a.format, &a.out)?;
    write_echo(&a.out, "export-prototypes", a, None)
}

/// Returns whether the manifest is free of fatal diagnostics.
fn cmd_validate(a: &ValidateArgs) -> Result<bool> {
    let file = ManifestFile::read(&a.manifest)?;
    let diags = validate_manifest(&file, &manifest::base_dir(&a.manifest));
    for d in &diags {
        eprintln!("{d}");
    }
    if let Some(out) = &a.out {
        write_json(out, &diags)?;
        write_echo(out, "validate", a, None)?;
    }
    Ok(!diags.iter().any(|d| d.fatal))
}

fn cmd_fixture(a: &FixtureArgs) -> Result<()> {
    let mut spec: FixtureSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => FixtureSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    let out = generate_fixture(&spec, &a.out)?;
    log::info!(
        "wrote {} and {}",
        out.train_manifest.display(),
        out.test_manifest.display()
    );
    write_echo(&a.out.join("fixture"), "fixture", a, Some(serde_json::to_value(&spec)?))
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already initialized: {e}");
        }
    }
    let outcome = match &cli.command {
        Command::BuildPrototypes(a) => cmd_build_prototypes(a),
        Command::BuildBackground(a) => cmd_build_background(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::ClassifyEval(a) => cmd_classify_eval(a),
        Command::ExportPrototypes(a) => cmd_export(a),
        Command::Validate(a) => match cmd_validate(a) {
            Ok(true) => Ok(()),
            Ok(false) => return 1,
            Err(e) => Err(e),
        },
        Command::Fixture(a) => cmd_fixture(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
