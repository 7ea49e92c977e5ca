//! Training and evaluation drivers for the two generalization experiments.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use crate::adversarial::objective::ImageSample;
use crate::adversarial::trainer::{StepLog, Trainer};
use crate::dataset::{DatasetIndex, Detection, ImageId, ImageStore};
use crate::detector::checkpoint::Checkpoint;
use crate::detector::model::{image_to_tensor, DetectorModel, HeadType};
use crate::error::{Error, Result};
use crate::geometry::SizeBucket;
use crate::metrics::{ar_at_k, harmonic_mean, ArCurve, EvalReport};
use crate::pipeline::coco::load_coco_json_with;
use crate::pipeline::config::{EvalSection, Experiment, ExperimentConfig, Variant};
use crate::protocol::{ClassSplit, Exclusion};

/// An annotation index with its pixels and any load-time warnings.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub index: DatasetIndex,
    pub store: ImageStore,
    pub warnings: Vec<String>,
}

pub fn load_dataset(
    json: &Path,
    images: Option<&Path>,
    aliases: &BTreeMap<String, String>,
) -> Result<LoadedDataset> {
    let loaded = load_coco_json_with(json, aliases)?;
    loaded.index.validate()?;
    let dir = match images {
        Some(d) => d.to_path_buf(),
        None => json.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    Ok(LoadedDataset {
        index: loaded.index,
        store: ImageStore::Directory(dir),
        warnings: loaded.warnings,
    })
}

/// Seen class ids of `vocabulary` in type order, with the unseen ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSplit {
    pub seen: Vec<usize>,
    pub unseen: BTreeSet<usize>,
    /// `(difficulty, class name, class id)`.
    pub by_difficulty: Vec<(&'static str, String, usize)>,
}

/// Maps split names onto a vocabulary; every class must be seen or unseen.
pub fn resolve_split(split: &ClassSplit, index: &DatasetIndex) -> Result<ResolvedSplit> {
    let vocab = &index.vocabulary;
    let seen = vocab.ids_of(&split.seen)?;
    let unseen_names = split.unseen();
    let unseen = vocab.ids_of(&unseen_names)?;
    if unseen.len() != unseen_names.len() || seen.len() != split.seen.len() {
        return Err(Error::Data(
            "split names collapse onto the same class after normalization".into(),
        ));
    }
    if let Some(id) = seen.intersection(&unseen).next() {
        return Err(Error::Data(format!(
            "class `{}` is both seen and unseen",
            vocab.names[*id]
        )));
    }
    let missing: Vec<&str> = (0..vocab.len())
        .filter(|i| !seen.contains(i) && !unseen.contains(i))
        .map(|i| vocab.names[i].as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "split does not cover classes {missing:?}"
        )));
    }
    let by_difficulty = split
        .unseen_by_difficulty()
        .into_iter()
        .map(|(d, name)| {
            let id = vocab.id_of(&name).expect("resolved above");
            (d, vocab.names[id].clone(), id)
        })
        .collect();
    Ok(ResolvedSplit {
        seen: seen.into_iter().collect(),
        unseen,
        by_difficulty,
    })
}

/// Training samples for every image with at least one annotation whose
/// class has a type label. Any other non-crowd annotation reaching this
/// point is a leak and fails the call.
pub fn build_samples(
    model: &DetectorModel,
    index: &DatasetIndex,
    store: &ImageStore,
    type_of: &BTreeMap<usize, usize>,
) -> Result<Vec<ImageSample>> {
    let by_image = index.annotations_by_image();
    let mut samples = Vec::with_capacity(index.images.len());
    for record in &index.images {
        let anns = &by_image[&record.id];
        let mut truths = Vec::new();
        let mut types = Vec::new();
        for a in anns.iter().filter(|a| !a.is_crowd) {
            let Some(&t) = type_of.get(&a.class_id) else {
                return Err(Error::Data(format!(
                    "annotation {} of class `{}` is not a training class",
                    a.id, index.vocabulary.names[a.class_id]
                )));
            };
            truths.push(a.bbox);
            types.push(t);
        }
        if truths.is_empty() {
            continue;
        }
        let image = load_tensor(model, store, index, record.id)?;
        samples.push(ImageSample::new(model, image, truths, types)?);
    }
    Ok(samples)
}

fn load_tensor(
    model: &DetectorModel,
    store: &ImageStore,
    index: &DatasetIndex,
    id: ImageId,
) -> Result<ndarray::Array3<f64>> {
    let record = index
        .image(id)
        .ok_or_else(|| Error::Data(format!("unknown image {id}")))?;
    let img = store.load(record)?;
    let (w, h) = img.dimensions();
    if w as usize != model.config.image_width || h as usize != model.config.image_height {
        return Err(Error::Data(format!(
            "image {} is {w}x{h}, the model expects {}x{}",
            record.id, model.config.image_width, model.config.image_height
        )));
    }
    Ok(image_to_tensor(&img))
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: DetectorModel,
    pub global_step: u64,
    pub model_updates: u64,
    pub disc_updates: u64,
    pub skipped_disc_updates: u64,
    pub log: Vec<StepLog>,
}

/// Trains the configured variant on prepared samples. Type labels in the
/// samples index `type_class_ids`.
pub fn train_variant(
    cfg: &ExperimentConfig,
    samples: &[ImageSample],
    type_class_ids: &[usize],
    mut log: Option<&mut (dyn Write + '_)>,
) -> Result<Trained> {
    let variant = cfg.variant;
    variant.check_mode(cfg.mode)?;
    let num_types = type_class_ids.len();
    let adversarial = variant.adversarial().then(|| cfg.adversarial.clone());
    let start = if variant.finetuned() {
        let aware = match &cfg.train.init_checkpoint {
            Some(path) => {
                let m = Checkpoint::load(path)?.to_model()?;
                let expect =
                    cfg.model_config(HeadType::ClassAware, num_types, type_class_ids.to_vec());
                if m.config != expect {
                    return Err(Error::Config(format!(
                        "checkpoint {} does not match the configured class-aware model",
                        path.display()
                    )));
                }
                m
            }
            None => {
                let model = DetectorModel::new(
                    cfg.model_config(HeadType::ClassAware, num_types, type_class_ids.to_vec()),
                    cfg.seed,
                )?;
                let mut pre =
                    Trainer::new(model, None, cfg.optim.clone(), cfg.seed.wrapping_add(1))?;
                let steps = cfg.train.pretrain_steps.unwrap_or(cfg.train.steps);
                pre.run(samples, steps, log.as_deref_mut())?;
                pre.model
            }
        };
        aware.agnostic_from(cfg.seed.wrapping_add(2))?
    } else {
        DetectorModel::new(
            cfg.model_config(variant.head_type(), num_types, type_class_ids.to_vec()),
            cfg.seed,
        )?
    };
    let mut trainer = Trainer::new(
        start,
        adversarial,
        cfg.optim.clone(),
        cfg.seed.wrapping_add(3),
    )?;
    let steps = trainer.steps_for_model_updates(cfg.train.steps);
    let entries = trainer.run(samples, steps, log)?;
    Ok(Trained {
        global_step: trainer.global_step,
        model_updates: trainer.model_updates,
        disc_updates: trainer.disc_updates,
        skipped_disc_updates: trainer.skipped_disc_updates,
        model: trainer.model,
        log: entries,
    })
}

/// Detections for every image of `index`; the proposal baseline reads the
/// first-stage proposals instead of the final detections.
pub fn predict(
    model: &DetectorModel,
    variant: Variant,
    index: &DatasetIndex,
    store: &ImageStore,
    eval: &EvalSection,
) -> Result<BTreeMap<ImageId, Vec<Detection>>> {
    let infer = eval.infer_config();
    let max_k = eval.max_k();
    let mut out = BTreeMap::new();
    for record in &index.images {
        let image = load_tensor(model, store, index, record.id)?;
        let dets = if variant.proposals() {
            model.infer_proposals(&image, record.id, max_k, &infer)?
        } else {
            model.infer(&image, record.id, max_k, &infer)?
        };
        out.insert(record.id, dets);
    }
    Ok(out)
}

fn size_curves(
    preds: &BTreeMap<ImageId, Vec<Detection>>,
    index: &DatasetIndex,
    classes: &BTreeSet<usize>,
    eval: &EvalSection,
) -> BTreeMap<String, ArCurve> {
    let top = [eval.max_k()];
    SizeBucket::ALL
        .iter()
        .map(|&b| {
            (
                b.name().to_string(),
                ar_at_k(
                    preds,
                    index,
                    &top,
                    eval.iou_threshold,
                    Some(classes),
                    Some(b),
                ),
            )
        })
        .collect()
}

/// Classes of `index` whose canonical names are absent from `vocabulary`.
pub fn classes_absent_from(
    index: &DatasetIndex,
    vocabulary: &crate::dataset::ClassVocabulary,
) -> BTreeSet<usize> {
    let known: BTreeSet<String> = (0..vocabulary.len())
        .filter_map(|i| vocabulary.canonical(i))
        .collect();
    (0..index.vocabulary.len())
        .filter(|&i| {
            index
                .vocabulary
                .canonical(i)
                .is_some_and(|n| !known.contains(&n))
        })
        .collect()
}

/// Cross-dataset inputs: predictions, truths and the classes to score.
pub type CrossSet<'a> = (
    &'a BTreeMap<ImageId, Vec<Detection>>,
    &'a DatasetIndex,
    &'a BTreeSet<usize>,
);

/// Seen/unseen report from predictions on the evaluation set, with an
/// optional cross-dataset curve over classes absent from training.
pub fn seen_unseen_report(
    name: &str,
    preds: &BTreeMap<ImageId, Vec<Detection>>,
    index: &DatasetIndex,
    split: &ClassSplit,
    eval: &EvalSection,
    cross: Option<CrossSet<'_>>,
) -> Result<EvalReport> {
    let resolved = resolve_split(split, index)?;
    let k = &eval.k_values;
    let thr = eval.iou_threshold;
    let seen: BTreeSet<usize> = resolved.seen.iter().copied().collect();
    let macro_seen = ar_at_k(preds, index, k, thr, Some(&seen), None);
    let macro_unseen = ar_at_k(preds, index, k, thr, Some(&resolved.unseen), None);
    let harmonic = harmonic_mean(&macro_seen, &macro_unseen)?;
    let per_class = (0..index.vocabulary.len())
        .map(|c| {
            (
                index.vocabulary.names[c].clone(),
                ar_at_k(preds, index, k, thr, Some(&BTreeSet::from([c])), None),
            )
        })
        .collect();
    let (cross_dataset, per_size) = match cross {
        Some((cp, ci, classes)) if !classes.is_empty() => (
            Some(ar_at_k(cp, ci, k, thr, Some(classes), None)),
            size_curves(cp, ci, classes, eval),
        ),
        _ => (None, size_curves(preds, index, &resolved.unseen, eval)),
    };
    Ok(EvalReport {
        name: name.to_string(),
        macro_seen,
        macro_unseen,
        harmonic_mean: harmonic,
        per_class,
        per_size,
        downstream: None,
        cross_dataset,
        split: Some(split.clone()),
    })
}

/// Evaluation-set classes split by an exclusion list into excluded and kept.
pub fn kept_classes(
    index: &DatasetIndex,
    excluded: &BTreeSet<String>,
) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
    let excluded: BTreeSet<String> = excluded
        .iter()
        .map(|n| crate::protocol::normalize_name(n, &index.vocabulary.aliases))
        .collect();
    let (mut out, mut kept) = (BTreeSet::new(), BTreeSet::new());
    for c in 0..index.vocabulary.len() {
        let name = index.vocabulary.canonical(c).expect("in range");
        if excluded.contains(&name) {
            out.insert(c);
        } else {
            kept.insert(c);
        }
    }
    if kept.is_empty() {
        return Err(Error::Data(
            "every evaluation class is excluded; nothing left to evaluate".into(),
        ));
    }
    Ok((out, kept))
}

/// Report over the non-overlapping (kept) classes of a second dataset. The
/// unseen columns hold the kept classes, the seen columns the excluded ones.
pub fn non_overlapping_report(
    name: &str,
    preds: &BTreeMap<ImageId, Vec<Detection>>,
    index: &DatasetIndex,
    excluded: &BTreeSet<String>,
    eval: &EvalSection,
) -> Result<EvalReport> {
    let (out, kept) = kept_classes(index, excluded)?;
    let k = &eval.k_values;
    let thr = eval.iou_threshold;
    let macro_seen = ar_at_k(preds, index, k, thr, Some(&out), None);
    let macro_unseen = ar_at_k(preds, index, k, thr, Some(&kept), None);
    let harmonic = harmonic_mean(&macro_seen, &macro_unseen)?;
    let per_class = kept
        .iter()
        .map(|&c| {
            (
                index.vocabulary.names[c].clone(),
                ar_at_k(preds, index, k, thr, Some(&BTreeSet::from([c])), None),
            )
        })
        .collect();
    Ok(EvalReport {
        name: name.to_string(),
        macro_seen,
        macro_unseen,
        harmonic_mean: harmonic,
        per_class,
        per_size: size_curves(preds, index, &kept, eval),
        downstream: None,
        cross_dataset: None,
        split: None,
    })
}

pub fn load_split(cfg: &ExperimentConfig) -> Result<ClassSplit> {
    match (&cfg.split, &cfg.split_file) {
        (Some(s), _) => Ok(s.clone()),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read split file {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                message: e.to_string(),
            })
        }
        (None, None) => Err(Error::Config("no class split configured".into())),
    }
}

pub fn load_exclusion(cfg: &ExperimentConfig) -> Result<BTreeSet<String>> {
    let section = cfg
        .exclusion
        .as_ref()
        .ok_or_else(|| Error::Config("no [exclusion] section".into()))?;
    match &section.file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!(
                    "cannot read exclusion file {}: {e}",
                    path.display()
                ))
            })?;
            let ex: Exclusion = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                message: e.to_string(),
            })?;
            Ok(ex.excluded)
        }
        None => Ok(section.excluded.iter().cloned().collect()),
    }
}

/// Everything an experiment run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub trained: Trained,
    pub train_warnings: Vec<String>,
}

/// Training half of experiment I: seen-class annotations only, images left
/// without any annotation dropped.
pub fn train_experiment_i(
    cfg: &ExperimentConfig,
    log: Option<&mut (dyn Write + '_)>,
) -> Result<(Trained, Vec<String>)> {
    let split = load_split(cfg)?;
    let train = load_dataset(
        &cfg.data.train,
        cfg.data.train_images.as_deref(),
        &cfg.data.aliases,
    )?;
    let resolved = resolve_split(&split, &train.index)?;
    let eval_index =
        crate::pipeline::coco::load_coco_json_with(&cfg.data.eval, &cfg.data.aliases)?.index;
    resolve_split(&split, &eval_index)?;
    let seen: BTreeSet<usize> = resolved.seen.iter().copied().collect();
    let filtered = train.index.filter_classes(&seen);
    let type_of: BTreeMap<usize, usize> = resolved
        .seen
        .iter()
        .enumerate()
        .map(|(t, &c)| (c, t))
        .collect();
    let shape = DetectorModel::new(
        cfg.model_config(HeadType::ClassAgnostic, seen.len(), resolved.seen.clone()),
        0,
    )?;
    let samples = build_samples(&shape, &filtered, &train.store, &type_of)?;
    if samples.is_empty() {
        return Err(Error::Data(
            "no training image keeps a seen-class annotation".into(),
        ));
    }
    Ok((
        train_variant(cfg, &samples, &resolved.seen, log)?,
        train.warnings,
    ))
}

/// Evaluation half of experiment I.
pub fn evaluate_experiment_i(cfg: &ExperimentConfig, model: &DetectorModel) -> Result<EvalReport> {
    let split = load_split(cfg)?;
    let train_vocab =
        crate::pipeline::coco::load_coco_json_with(&cfg.data.train, &cfg.data.aliases)?
            .index
            .vocabulary;
    let eval_set = load_dataset(
        &cfg.data.eval,
        cfg.data.eval_images.as_deref(),
        &cfg.data.aliases,
    )?;
    resolve_split(&split, &eval_set.index)?;
    let preds = predict(
        model,
        cfg.variant,
        &eval_set.index,
        &eval_set.store,
        &cfg.eval,
    )?;
    let cross = match &cfg.data.cross {
        Some(path) => {
            let c = load_dataset(path, cfg.data.cross_images.as_deref(), &cfg.data.aliases)?;
            let classes = classes_absent_from(&c.index, &train_vocab);
            let p = predict(model, cfg.variant, &c.index, &c.store, &cfg.eval)?;
            Some((p, c.index, classes))
        }
        None => None,
    };
    seen_unseen_report(
        &cfg.display_name(),
        &preds,
        &eval_set.index,
        &split,
        &cfg.eval,
        cross.as_ref().map(|(p, i, c)| (p, i, c)),
    )
}

/// Training half of experiment II: every class of the training dataset.
pub fn train_experiment_ii(
    cfg: &ExperimentConfig,
    log: Option<&mut (dyn Write + '_)>,
) -> Result<(Trained, Vec<String>)> {
    let excluded = load_exclusion(cfg)?;
    let eval_index =
        crate::pipeline::coco::load_coco_json_with(&cfg.data.eval, &cfg.data.aliases)?.index;
    kept_classes(&eval_index, &excluded)?;
    let train = load_dataset(
        &cfg.data.train,
        cfg.data.train_images.as_deref(),
        &cfg.data.aliases,
    )?;
    let all: Vec<usize> = (0..train.index.vocabulary.len()).collect();
    let type_of: BTreeMap<usize, usize> = all.iter().map(|&c| (c, c)).collect();
    let shape = DetectorModel::new(
        cfg.model_config(HeadType::ClassAgnostic, all.len(), all.clone()),
        0,
    )?;
    let samples = build_samples(&shape, &train.index, &train.store, &type_of)?;
    if samples.is_empty() {
        return Err(Error::Data("training set has no annotated image".into()));
    }
    Ok((train_variant(cfg, &samples, &all, log)?, train.warnings))
}

/// Evaluation half of experiment II.
pub fn evaluate_experiment_ii(cfg: &ExperimentConfig, model: &DetectorModel) -> Result<EvalReport> {
    let excluded = load_exclusion(cfg)?;
    let eval_set = load_dataset(
        &cfg.data.eval,
        cfg.data.eval_images.as_deref(),
        &cfg.data.aliases,
    )?;
    let preds = predict(
        model,
        cfg.variant,
        &eval_set.index,
        &eval_set.store,
        &cfg.eval,
    )?;
    non_overlapping_report(
        &cfg.display_name(),
        &preds,
        &eval_set.index,
        &excluded,
        &cfg.eval,
    )
}

pub fn train_experiment(
    cfg: &ExperimentConfig,
    log: Option<&mut (dyn Write + '_)>,
) -> Result<(Trained, Vec<String>)> {
    match cfg.experiment {
        Experiment::SeenUnseen => train_experiment_i(cfg, log),
        Experiment::NonOverlapping => train_experiment_ii(cfg, log),
    }
}

pub fn evaluate_experiment(cfg: &ExperimentConfig, model: &DetectorModel) -> Result<EvalReport> {
    match cfg.experiment {
        Experiment::SeenUnseen => evaluate_experiment_i(cfg, model),
        Experiment::NonOverlapping => evaluate_experiment_ii(cfg, model),
    }
}

/// Experiment I: train on seen classes only, evaluate seen and unseen
/// classes plus the optional cross dataset.
pub fn run_experiment_i(
    cfg: &ExperimentConfig,
    log: Option<&mut (dyn Write + '_)>,
) -> Result<ExperimentOutcome> {
    let (trained, train_warnings) = train_experiment_i(cfg, log)?;
    let report = evaluate_experiment_i(cfg, &trained.model)?;
    Ok(ExperimentOutcome {
        report,
        trained,
        train_warnings,
    })
}

/// Experiment II: train on every class of the first dataset, evaluate on
/// the classes of the second that the exclusion list keeps.
pub fn run_experiment_ii(
    cfg: &ExperimentConfig,
    log: Option<&mut (dyn Write + '_)>,
) -> Result<ExperimentOutcome> {
    let (trained, train_warnings) = train_experiment_ii(cfg, log)?;
    let report = evaluate_experiment_ii(cfg, &trained.model)?;
    Ok(ExperimentOutcome {
        report,
        trained,
        train_warnings,
    })
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    log: Option<&mut (dyn Write + '_)>,
) -> Result<ExperimentOutcome> {
    match cfg.experiment {
        Experiment::SeenUnseen => run_experiment_i(cfg, log),
        Experiment::NonOverlapping => run_experiment_ii(cfg, log),
    }
}
