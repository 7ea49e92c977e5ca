use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agnostic_det::detector::Checkpoint;
use agnostic_det::downstream::{
    downstream_images, evaluate_downstream, ClassifierClient, DownstreamConfig, IouOracle,
    SocketClassifier,
};
use agnostic_det::error::{Error, Result};
use agnostic_det::metrics::EvalReport;
use agnostic_det::pipeline::coco::{load_coco_json_with, save_coco_json};
use agnostic_det::pipeline::config::{EvalSection, ExperimentConfig, Variant};
use agnostic_det::pipeline::experiment::{
    evaluate_experiment, load_dataset, predict, train_experiment,
};
use agnostic_det::pipeline::report::{emit_report, reports_from_json, ReportFormat};
use agnostic_det::pipeline::shapes::{generate_shapes, ShapesConfig};
use agnostic_det::protocol::{
    excluded_classes, f1_scores, normalize_name, parse_class_descriptions, select_unseen,
    ConfusionMatrix, SemanticTree,
};

/// Class-agnostic detection with adversarial object-type discriminators.
#[derive(Parser)]
#[command(name = "agnostic-det", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset (PNG images + COCO JSON).
    GenShapes(GenShapesArgs),
    /// Train the variant described by an experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint with AR@k per the experiment config.
    EvaluateAr(EvaluateArgs),
    /// Pick easy/medium/hard unseen classes from a confusion matrix.
    SplitClasses(SplitArgs),
    /// Build the non-overlapping class list from a class hierarchy.
    BuildExclusion(ExclusionArgs),
    /// Crop-and-classify evaluation of a checkpoint.
    EvalDownstream(DownstreamArgs),
    /// Render JSON reports as JSON, a text table and SVG plots.
    EmitReport(EmitArgs),
}

#[derive(Args)]
struct GenShapesArgs {
    /// Output directory for images and annotations.json.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with shapes settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_images: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated shape names.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    #[arg(long)]
    first_id: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-step JSON-lines training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report JSON path to write.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Confusion matrix JSON.
    #[arg(long)]
    confusion: PathBuf,
    /// Count background misses and false positives in F1.
    #[arg(long)]
    include_background: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExclusionArgs {
    /// Hierarchy JSON (nested LabelName/Subcategory).
    #[arg(long)]
    hierarchy: PathBuf,
    /// Optional `MID,Display Name` CSV for the hierarchy labels.
    #[arg(long)]
    descriptions: Option<PathBuf>,
    /// COCO JSON whose categories are the reference classes.
    #[arg(long, conflicts_with = "reference_names")]
    reference: Option<PathBuf>,
    /// Comma-separated reference class names.
    #[arg(long, value_delimiter = ',')]
    reference_names: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DownstreamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// COCO JSON of the evaluation images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    m_grid: Vec<usize>,
    #[arg(long, default_value_t = 0.0)]
    padding: f64,
    /// `oracle` or `socket:HOST:PORT`.
    #[arg(long, default_value = "oracle")]
    classifier: String,
    #[arg(long, default_value_t = 3)]
    max_attempts: usize,
    /// Use first-stage proposals (two-stage checkpoints only).
    #[arg(long)]
    proposals: bool,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct EmitArgs {
    /// Report JSON files (single report or list).
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "json,table,plots")]
    format: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn gen_shapes(a: GenShapesArgs) -> Result<()> {
    let mut cfg: ShapesConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ShapesConfig::default(),
    };
    if let Some(n) = a.num_images {
        cfg.num_images = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(c) = a.classes {
        cfg.classes = c;
    }
    if let Some(f) = a.first_id {
        cfg.first_id = f;
    }
    let (index, store) = generate_shapes(&cfg)?;
    store.save_to_dir(&index, &a.out)?;
    save_coco_json(&index, &a.out.join("annotations.json"))?;
    println!(
        "wrote {} images, {} objects to {}",
        index.images.len(),
        index.annotations.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let mut log_file = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let (trained, warnings) =
        train_experiment(&cfg, log_file.as_mut().map(|w| w as &mut dyn Write))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    if let Some(mut w) = log_file {
        w.flush()?;
    }
    let ckpt = Checkpoint::from_model(
        &trained.model,
        Some(cfg.variant.name()),
        trained.global_step,
        trained.model_updates,
    );
    ckpt.save(&a.out)?;
    println!(
        "{}: {} global steps, {} model updates, {} discriminator updates ({} skipped) -> {}",
        cfg.display_name(),
        trained.global_step,
        trained.model_updates,
        trained.disc_updates,
        trained.skipped_disc_updates,
        a.out.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let model = Checkpoint::load(&a.checkpoint)?.to_model()?;
    let report = evaluate_experiment(&cfg, &model)?;
    write_json(&a.report, &report)?;
    let k = report.macro_unseen.top_k();
    println!(
        "{}: AR@{k} seen {:.4} unseen {:.4} hm {:.4}",
        report.name,
        report.macro_seen.last(),
        report.macro_unseen.last(),
        report.harmonic_mean.last()
    );
    Ok(())
}

fn split_classes(a: SplitArgs) -> Result<()> {
    let text = read_text(&a.confusion)?;
    let cm: ConfusionMatrix = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: a.confusion.clone(),
        message: e.to_string(),
    })?;
    let f1 = f1_scores(&cm, a.include_background)?;
    let split = select_unseen(&f1)?;
    write_json(&a.out, &split)?;
    for (d, c) in split.unseen_by_difficulty() {
        println!("{d}: {c} (F1 {:.4})", f1[&c]);
    }
    Ok(())
}

fn build_exclusion(a: ExclusionArgs) -> Result<()> {
    let json: serde_json::Value =
        serde_json::from_str(&read_text(&a.hierarchy)?).map_err(|e| Error::Parse {
            path: a.hierarchy.clone(),
            message: e.to_string(),
        })?;
    let names = match &a.descriptions {
        Some(p) => parse_class_descriptions(&read_text(p)?),
        None => BTreeMap::new(),
    };
    let aliases = BTreeMap::new();
    let tree = SemanticTree::from_open_images_json(&json, &names, &aliases)?;
    let raw: Vec<String> = match (&a.reference, &a.reference_names) {
        (Some(p), _) => load_coco_json_with(p, &aliases)?.index.vocabulary.names,
        (None, Some(n)) => n.clone(),
        (None, None) => {
            return Err(Error::Config(
                "pass --reference or --reference-names".into(),
            ))
        }
    };
    let reference: BTreeSet<String> = raw.iter().map(|n| normalize_name(n, &aliases)).collect();
    let ex = excluded_classes(&tree, &reference);
    for w in &ex.warnings {
        eprintln!("warning: {w}");
    }
    write_json(&a.out, &ex)?;
    println!(
        "excluded {} classes, kept {}",
        ex.excluded.len(),
        ex.kept.len()
    );
    Ok(())
}

fn eval_downstream(a: DownstreamArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    let data = load_dataset(&a.data, a.images.as_deref(), &BTreeMap::new())?;
    let images = downstream_images(&data.index, &data.store)?;
    let variant = if a.proposals {
        Variant::AwareProposals
    } else {
        Variant::Agnostic
    };
    let eval = EvalSection {
        k_values: vec![a.m_grid.iter().copied().max().unwrap_or(1).max(1)],
        ..EvalSection::default()
    };
    let preds = predict(&model, variant, &data.index, &data.store, &eval)?;
    let cfg = DownstreamConfig {
        m_values: a.m_grid.clone(),
        padding: a.padding,
        max_attempts: a.max_attempts,
    };
    let mut client: Box<dyn ClassifierClient> = if a.classifier == "oracle" {
        Box::new(IouOracle::new(
            images
                .iter()
                .map(|i| (i.image_id, (i.truth_box, i.truth_label.clone())))
                .collect(),
        ))
    } else if let Some(addr) = a.classifier.strip_prefix("socket:") {
        Box::new(SocketClassifier::new(addr))
    } else {
        return Err(Error::Config(format!(
            "unknown classifier `{}` (oracle | socket:ADDR)",
            a.classifier
        )));
    };
    let (report, _) = evaluate_downstream(&images, &preds, client.as_mut(), &cfg)?;
    write_json(&a.report, &report)?;
    for (m, acc) in &report.accuracy_at_m {
        println!("Acc@{m}: {acc:.4}");
    }
    println!(
        "BO-acc: {:.4}  failed images: {}",
        report.bo_accuracy, report.failed_images
    );
    Ok(())
}

fn emit(a: EmitArgs) -> Result<()> {
    let formats = a
        .format
        .iter()
        .map(|f| f.parse())
        .collect::<Result<Vec<ReportFormat>>>()?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for p in &a.input {
        reports.extend(reports_from_json(&read_text(p)?, p)?);
    }
    for p in emit_report(&reports, &formats, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenShapes(a) => gen_shapes(a),
        Command::Train(a) => train(a),
        Command::EvaluateAr(a) => evaluate(a),
        Command::SplitClasses(a) => split_classes(a),
        Command::BuildExclusion(a) => build_exclusion(a),
        Command::EvalDownstream(a) => eval_downstream(a),
        Command::EmitReport(a) => emit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
