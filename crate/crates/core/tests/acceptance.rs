//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line per
//! criterion; exits non-zero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 1 2 5`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use agnostic_det::adversarial::losses::entropy_penalty;
use agnostic_det::adversarial::objective::{
    discriminator_objective, make_plan, model_objective, Discriminators, ImageSample,
    SamplingConfig,
};
use agnostic_det::adversarial::probe::{type_probe, ProbeConfig};
use agnostic_det::adversarial::schedule::Action;
use agnostic_det::adversarial::trainer::{AdversarialConfig, OptimConfig, Trainer};
use agnostic_det::dataset::{
    Annotation, ClassVocabulary, DatasetIndex, Detection, ImageId, ImageRecord,
};
use agnostic_det::detector::boxcoder::{decode_box, encode_box};
use agnostic_det::detector::checkpoint::Checkpoint;
use agnostic_det::detector::model::{DetectorModel, HeadType, Mode, ModelConfig};
use agnostic_det::detector::nn::Parameters;
use agnostic_det::downstream::classifier::IouOracle;
use agnostic_det::downstream::evaluate::{evaluate_downstream, DownstreamConfig, DownstreamImage};
use agnostic_det::geometry::{iou, BoundingBox};
use agnostic_det::metrics::{ar_at_k, harmonic_mean_value};
use agnostic_det::pipeline::coco::save_coco_json;
use agnostic_det::pipeline::config::{ExperimentConfig, Variant};
use agnostic_det::pipeline::experiment::{
    build_samples, evaluate_experiment, predict, train_experiment, train_variant,
};
use agnostic_det::pipeline::report::{
    emit_report, reports_from_json, table_is_consistent, ReportFormat,
};
use agnostic_det::pipeline::shapes::{generate_shapes, ShapesConfig};
use agnostic_det::protocol::{
    excluded_classes, f1_scores, select_unseen, ConfusionMatrix, SemanticTree,
};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type IntBox = [i64; 4];
/// Per image: scored detections and `(box, class, crowd)` truths.
type RawImage = (Vec<(IntBox, f64)>, Vec<(IntBox, usize, bool)>);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

// ---------------------------------------------------------------------------
// 1. AR@k against a brute-force oracle with exact integer IoU arithmetic.

/// IoU of integer boxes as an exact fraction `(intersection, union)`.
fn int_iou(a: [i64; 4], b: [i64; 4]) -> (i64, i64) {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    let inter = w * h;
    let area = |r: [i64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    (inter, area(a) + area(b) - inter)
}

fn oracle_recall(dets: &[([i64; 4], f64)], truths: &[[i64; 4]], k: usize) -> usize {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // Stable: equal scores keep input order.
    order.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).unwrap());
    let mut taken = vec![false; truths.len()];
    let mut hits = 0;
    for &d in order.iter().take(k) {
        let mut best: Option<(usize, (i64, i64))> = None;
        for (t, tb) in truths.iter().enumerate() {
            if taken[t] {
                continue;
            }
            let (n, u) = int_iou(dets[d].0, *tb);
            // n / u >= 1/2
            if 2 * n < u {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, (bn, bu))) => n * bu > bn * u,
            };
            if better {
                best = Some((t, (n, u)));
            }
        }
        if let Some((t, _)) = best {
            taken[t] = true;
            hits += 1;
        }
    }
    hits
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k_values = [1usize, 2, 3, 5];
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0..8i64);
        let y = rng.random_range(0..8i64);
        [
            x,
            y,
            x + rng.random_range(1..5i64),
            y + rng.random_range(1..5i64),
        ]
    };
    let instances = 1500;
    for case in 0..instances {
        let n_images = rng.random_range(1..4usize);
        let vocab = ClassVocabulary::from_names(&["a", "b", "c"]).unwrap();
        let mut index = DatasetIndex {
            images: vec![],
            annotations: vec![],
            vocabulary: vocab,
        };
        let mut preds: BTreeMap<ImageId, Vec<Detection>> = BTreeMap::new();
        let mut raw: Vec<RawImage> = Vec::new();
        let mut ann_id = 1;
        for img in 0..n_images {
            let id = img as u64 + 1;
            index.images.push(ImageRecord {
                id,
                width: 16,
                height: 16,
                file_name: format!("{id}.png"),
            });
            let truths: Vec<([i64; 4], usize, bool)> = (0..rng.random_range(0..=4))
                .map(|_| {
                    (
                        rand_box(&mut rng),
                        rng.random_range(0..3usize),
                        rng.random_bool(0.1),
                    )
                })
                .collect();
            // Few distinct score values so ties are common.
            let dets: Vec<([i64; 4], f64)> = (0..rng.random_range(0..=5))
                .map(|_| (rand_box(&mut rng), rng.random_range(0..4) as f64 / 4.0))
                .collect();
            for (b, c, crowd) in &truths {
                index.annotations.push(Annotation {
                    id: ann_id,
                    image_id: id,
                    bbox: BoundingBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64),
                    class_id: *c,
                    is_crowd: *crowd,
                });
                ann_id += 1;
            }
            preds.insert(
                id,
                dets.iter()
                    .map(|(b, s)| {
                        let mut d = Detection::agnostic(
                            id,
                            BoundingBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64),
                            *s,
                        );
                        d.class_id = Some(rng.random_range(0..3));
                        d
                    })
                    .collect(),
            );
            raw.push((dets, truths));
        }
        let filter: Option<BTreeSet<usize>> = rng
            .random_bool(0.5)
            .then(|| [rng.random_range(0..3usize)].into());
        let curve = ar_at_k(&preds, &index, &k_values, 0.5, filter.as_ref(), None);
        for (ki, &k) in k_values.iter().enumerate() {
            let mut hits = 0;
            let mut total = 0;
            for (dets, truths) in &raw {
                let kept: Vec<[i64; 4]> = truths
                    .iter()
                    .filter(|(_, c, crowd)| !crowd && filter.as_ref().is_none_or(|f| f.contains(c)))
                    .map(|(b, _, _)| *b)
                    .collect();
                total += kept.len();
                hits += oracle_recall(dets, &kept, k);
            }
            let expect = if total == 0 {
                0.0
            } else {
                hits as f64 / total as f64
            };
            check(curve.recalls[ki] == expect, || {
                format!(
                    "case {case} k={k}: ar_at_k {} vs oracle {expect}",
                    curve.recalls[ki]
                )
            })?;
        }
    }
    Ok(format!(
        "{instances} random instances, exact agreement at k in {k_values:?}"
    ))
}

// ---------------------------------------------------------------------------
// 2. Geometry properties.

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 20_000;
    let mut worst_roundtrip = 0.0f64;
    let rand_box = |rng: &mut ChaCha8Rng| {
        BoundingBox::from_xywh(
            rng.random_range(-200.0..200.0),
            rng.random_range(-200.0..200.0),
            rng.random_range(0.5..150.0),
            rng.random_range(0.5..150.0),
        )
    };
    for i in 0..n {
        let a = rand_box(&mut rng);
        let b = rand_box(&mut rng);
        check(iou(&a, &b) == iou(&b, &a), || {
            format!("box {i}: IoU not symmetric")
        })?;
        check((iou(&a, &a) - 1.0).abs() < 1e-12, || {
            format!("box {i}: IoU(a, a) = {}", iou(&a, &a))
        })?;
        let v = iou(&a, &b);
        check((0.0..=1.0).contains(&v), || {
            format!("box {i}: IoU {v} outside [0, 1]")
        })?;
        let (dx, dy) = (
            rng.random_range(-100.0..100.0),
            rng.random_range(-100.0..100.0),
        );
        let moved = iou(&a.translate(dx, dy), &b.translate(dx, dy));
        check((moved - v).abs() < 1e-9, || {
            format!("box {i}: translation changed IoU {v} -> {moved}")
        })?;
        let enc = encode_box(&a, &b).map_err(|e| e.to_string())?;
        let dec = decode_box(&a, &enc);
        let err = [
            dec.x_min - b.x_min,
            dec.y_min - b.y_min,
            dec.x_max - b.x_max,
            dec.y_max - b.y_max,
        ]
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()));
        worst_roundtrip = worst_roundtrip.max(err);
        check(err < 1e-6, || format!("box {i}: encode/decode error {err}"))?;
    }
    Ok(format!(
        "{n} random box pairs, worst round-trip error {worst_roundtrip:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 3. Full-model gradients against central finite differences.

const FD_STEP: f64 = 1e-3;
const FD_TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn micro_sample(model: &DetectorModel, rng: &mut ChaCha8Rng, num_types: usize) -> ImageSample {
    let (w, h) = (model.config.image_width, model.config.image_height);
    let image = Array3::from_shape_fn((3, h, w), |_| rng.random_range(-1.0..1.0));
    let truths = vec![
        BoundingBox::new(1.0, 2.0, 9.0, 8.0),
        BoundingBox::new(6.0, 5.0, 15.0, 15.0),
        BoundingBox::new(2.5, 9.0, 7.5, 14.0),
    ];
    let types = (0..truths.len()).map(|i| i % num_types).collect();
    ImageSample::new(model, image, truths, types).unwrap()
}

fn fd_check<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], analytic: &[f64]) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut at = 0;
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + FD_STEP;
        let up = f(&p);
        p[i] = x[i] - FD_STEP;
        let down = f(&p);
        p[i] = x[i];
        let e = rel_err(analytic[i], (up - down) / (2.0 * FD_STEP));
        if e > worst {
            worst = e;
            at = i;
        }
    }
    (worst, at)
}

fn criterion_3() -> Outcome {
    let num_types = 3;
    let mut lines = Vec::new();
    let mut checked = 0usize;
    for seed in 0..3u64 {
        for (mode, head) in [
            (Mode::OneStage, HeadType::ClassAgnostic),
            (Mode::OneStage, HeadType::ClassAware),
            (Mode::TwoStage, HeadType::ClassAgnostic),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let model =
                DetectorModel::new(ModelConfig::micro(mode, head, num_types), seed).unwrap();
            let discs = Discriminators::for_model(&model, 8, seed + 7);
            let sample = micro_sample(&model, &mut rng, num_types);
            let pass = model.forward(&sample.image).unwrap();
            let plan = make_plan(
                &model,
                &sample,
                &pass,
                &SamplingConfig {
                    neg_per_pos: 3,
                    min_negatives: 4,
                },
                &mut rng,
            )
            .unwrap();
            let alpha = 0.7;

            let obj =
                model_objective(&model, Some(&discs), &sample, &plan, alpha, true, true).unwrap();
            let analytic = obj.grads.unwrap().to_flat();
            let x = model.weights.to_flat();
            let (worst, at) = fd_check(
                |p| {
                    let mut m = model.clone();
                    m.weights.load_flat(p);
                    model_objective(&m, Some(&discs), &sample, &plan, alpha, true, false)
                        .unwrap()
                        .loss
                        .total
                },
                &x,
                &analytic,
            );
            check(worst <= FD_TOL, || {
                format!(
                    "model_loss {mode:?}/{head:?} seed {seed}: rel err {worst:.2e} at param {at}"
                )
            })?;
            checked += x.len();

            let dobj = discriminator_objective(&model, &discs, &sample, &plan, true).unwrap();
            let danalytic = dobj
                .grads
                .ok_or("no foreground rows for the discriminator")?
                .to_flat();
            let dx = discs.to_flat();
            let (dworst, dat) = fd_check(
                |p| {
                    let mut d = discs.clone();
                    d.load_flat(p);
                    discriminator_objective(&model, &d, &sample, &plan, false)
                        .unwrap()
                        .loss
                        .unwrap()
                },
                &dx,
                &danalytic,
            );
            check(dworst <= FD_TOL, || {
                format!(
                    "discriminator_loss {mode:?} seed {seed}: rel err {dworst:.2e} at param {dat}"
                )
            })?;
            checked += dx.len();
            lines.push(worst.max(dworst));
        }
    }
    let worst = lines.iter().cloned().fold(0.0, f64::max);
    Ok(format!(
        "{checked} parameters over 3 seeds x 3 model kinds, worst rel err {worst:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// 4 and 6. Schedule, isolation and the alpha = 0 reduction.

fn micro_dataset(model: &DetectorModel, n: usize, seed: u64) -> Vec<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let image = Array3::from_shape_fn((3, 16, 16), |_| rng.random_range(-1.0..1.0));
            let k = rng.random_range(1..=2);
            let truths: Vec<BoundingBox> = (0..k)
                .map(|_| {
                    let x = rng.random_range(0.0..8.0);
                    let y = rng.random_range(0.0..8.0);
                    BoundingBox::new(
                        x,
                        y,
                        x + rng.random_range(4.0..8.0),
                        y + rng.random_range(4.0..8.0),
                    )
                })
                .collect();
            let types = (0..k).map(|_| rng.random_range(0..2)).collect();
            ImageSample::new(model, image, truths, types).unwrap()
        })
        .collect()
}

fn micro_optim() -> OptimConfig {
    OptimConfig {
        batch_size: 4,
        min_negatives: 4,
        ..OptimConfig::default()
    }
}

fn criterion_4() -> Outcome {
    let mut total_model = 0;
    for mode in [Mode::OneStage, Mode::TwoStage] {
        let model =
            DetectorModel::new(ModelConfig::micro(mode, HeadType::ClassAgnostic, 2), 4).unwrap();
        let data = micro_dataset(&model, 12, 40);
        let mut t =
            Trainer::new(model, Some(AdversarialConfig::default()), micro_optim(), 4).unwrap();
        let (mut model_steps, mut disc_steps) = (0, 0);
        for step in 1..=600u64 {
            let before_model = t.model.weights.to_flat();
            let before_disc = t.discriminators.as_ref().unwrap().to_flat();
            let log = t.step(&data).map_err(|e| e.to_string())?;
            let after_model = t.model.weights.to_flat();
            let after_disc = t.discriminators.as_ref().unwrap().to_flat();
            let same =
                |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            match log.action {
                Action::UpdateModel => {
                    model_steps += 1;
                    check(step % 6 == 0, || {
                        format!("{mode:?}: model update at step {step}")
                    })?;
                    check(same(&before_disc, &after_disc), || {
                        format!("{mode:?}: discriminators moved at model step {step}")
                    })?;
                    check(!same(&before_model, &after_model), || {
                        format!("{mode:?}: model did not move at step {step}")
                    })?;
                }
                Action::UpdateDiscriminator => {
                    disc_steps += 1;
                    check(same(&before_model, &after_model), || {
                        format!("{mode:?}: model moved at discriminator step {step}")
                    })?;
                }
            }
        }
        check(model_steps == 100 && disc_steps == 500, || {
            format!("{mode:?}: {model_steps} model / {disc_steps} discriminator steps")
        })?;
        check(t.model_updates == 100, || {
            format!(
                "{mode:?}: trainer counted {} model updates",
                t.model_updates
            )
        })?;
        total_model += model_steps;
    }
    Ok(format!("600 steps per mode: 100 model + 500 discriminator updates ({total_model} model updates over both modes), freezing bit-exact"))
}

fn criterion_6() -> Outcome {
    for mode in [Mode::OneStage, Mode::TwoStage] {
        let model =
            DetectorModel::new(ModelConfig::micro(mode, HeadType::ClassAgnostic, 2), 6).unwrap();
        let data = micro_dataset(&model, 10, 60);
        let adv = AdversarialConfig {
            alpha: 0.0,
            discriminator_enabled: false,
            ..AdversarialConfig::default()
        };
        let mut a = Trainer::new(model.clone(), Some(adv), micro_optim(), 9).unwrap();
        let mut b = Trainer::new(model, None, micro_optim(), 9).unwrap();
        for step in 1..=50 {
            a.step(&data).map_err(|e| e.to_string())?;
            b.step(&data).map_err(|e| e.to_string())?;
            let (wa, wb) = (a.model.weights.to_flat(), b.model.weights.to_flat());
            check(
                wa.iter().zip(&wb).all(|(x, y)| x.to_bits() == y.to_bits()),
                || format!("{mode:?}: trajectories diverge at step {step}"),
            )?;
        }
    }
    Ok("50 steps, one-stage and two-stage, weights bit-identical at every step".into())
}

// ---------------------------------------------------------------------------
// 5. Entropy bounds.

fn criterion_5() -> Outcome {
    let c = 10;
    let ln_c = (c as f64).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let scale = rng.random_range(0.01..30.0);
        let rows = rng.random_range(1..6);
        let logits = Array2::from_shape_fn((rows, c), |_| scale * rng.random_range(-1.0..1.0));
        let (v, _) = entropy_penalty(logits.view());
        check(v >= -ln_c - 1e-12 && v <= 1e-12, || {
            format!("trial {trial}: penalty {v} outside [-ln C, 0]")
        })?;
    }
    let (uniform, _) = entropy_penalty(Array2::<f64>::from_elem((3, c), 0.7).view());
    check((uniform + ln_c).abs() < 1e-12, || {
        format!("uniform penalty {uniform}, expected {}", -ln_c)
    })?;
    let mut peaked = Array2::<f64>::zeros((2, c));
    peaked[[0, 3]] = 20.0;
    peaked[[1, 7]] = 20.0;
    let (onehot, _) = entropy_penalty(peaked.view());
    check(onehot >= -0.01, || format!("near-one-hot penalty {onehot}"))?;
    Ok(format!(
        "1000 random batches in [-ln 10, 0]; uniform {uniform:.6}; near-one-hot {onehot:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// 7. Synthetic analog of the seen/unseen generalization ordering.

const SYNTH_SEEDS: u64 = 5;
const SYNTH_TRAIN_IMAGES: usize = 2000;
const SYNTH_EVAL_IMAGES: usize = 300;
const SYNTH_MODEL_UPDATES: u64 = 3000;
const SYNTH_ALPHA: f64 = 0.1;

fn synth_shapes() -> ShapesConfig {
    ShapesConfig {
        min_objects: 2,
        max_objects: 5,
        min_size: 12,
        max_size: 40,
        ..ShapesConfig::default()
    }
}

fn criterion_7() -> Outcome {
    let base = r#"
variant = "agnostic"
split = { seen = ["circle", "square", "triangle"], unseen_easy = "cross", unseen_hard = "ring" }
[data]
train = "unused"
eval = "unused"
"#;
    let variants = [Variant::Aware, Variant::Agnostic, Variant::AgnosticAdv];
    let mut unseen: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
    let mut probe: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
    let seen: BTreeSet<usize> = [0, 1, 2].into();
    let unseen_ids: BTreeSet<usize> = [3, 4].into();
    let type_of: BTreeMap<usize, usize> = [(0, 0), (1, 1), (2, 2)].into();
    for seed in 0..SYNTH_SEEDS {
        let shapes = synth_shapes();
        let (train, train_store) = generate_shapes(&ShapesConfig {
            num_images: SYNTH_TRAIN_IMAGES,
            seed: 1000 + seed,
            ..shapes.clone()
        })
        .unwrap();
        let (eval, eval_store) = generate_shapes(&ShapesConfig {
            num_images: SYNTH_EVAL_IMAGES,
            seed: 5000 + seed,
            ..shapes
        })
        .unwrap();
        let mut cfg = ExperimentConfig::from_toml(base).unwrap();
        cfg.seed = seed;
        cfg.train.steps = SYNTH_MODEL_UPDATES;
        cfg.adversarial.alpha = SYNTH_ALPHA;
        cfg.eval.k_values = vec![100];
        let shape = DetectorModel::new(
            cfg.model_config(HeadType::ClassAgnostic, 3, vec![0, 1, 2]),
            0,
        )
        .unwrap();
        let samples =
            build_samples(&shape, &train.filter_classes(&seen), &train_store, &type_of).unwrap();
        let probe_samples =
            build_samples(&shape, &eval.filter_classes(&seen), &eval_store, &type_of).unwrap();
        for v in variants {
            cfg.variant = v;
            let trained =
                train_variant(&cfg, &samples, &[0, 1, 2], None).map_err(|e| e.to_string())?;
            let preds = predict(&trained.model, v, &eval, &eval_store, &cfg.eval)
                .map_err(|e| e.to_string())?;
            let ar = ar_at_k(&preds, &eval, &[100], 0.5, Some(&unseen_ids), None).recalls[0];
            let p = type_probe(&trained.model, &probe_samples, 3, &ProbeConfig::default())
                .map_err(|e| e.to_string())?;
            println!(
                "    seed {seed} {:<14} unseen AR@100 {ar:.4}  type probe {:.4}",
                v.name(),
                p.accuracy
            );
            unseen.entry(v).or_default().push(ar);
            probe.entry(v).or_default().push(p.accuracy);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ar = |v| mean(&unseen[&v]);
    let pr = |v| mean(&probe[&v]);
    let summary = format!(
        "mean unseen AR@100 aware {:.4} / agnostic {:.4} / agnostic-adv {:.4}; probe agnostic {:.4} / agnostic-adv {:.4}",
        ar(Variant::Aware),
        ar(Variant::Agnostic),
        ar(Variant::AgnosticAdv),
        pr(Variant::Agnostic),
        pr(Variant::AgnosticAdv)
    );
    let ordered = ar(Variant::AgnosticAdv) > ar(Variant::Agnostic)
        && ar(Variant::Agnostic) > ar(Variant::Aware);
    let probe_ok = pr(Variant::AgnosticAdv) < pr(Variant::Agnostic);
    if ordered && probe_ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------------------
// 8. Protocol fixtures and exclusion against a reachability oracle.

fn criterion_8() -> Outcome {
    let text = std::fs::read_to_string(fixture("voc_confusion.json")).map_err(|e| e.to_string())?;
    let cm: ConfusionMatrix = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let split = select_unseen(&f1_scores(&cm, false).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let got = (
        split.unseen_easy.clone(),
        split.unseen_medium.clone(),
        split.unseen_hard.clone(),
    );
    let want = (
        Some("cow".to_string()),
        Some("boat".to_string()),
        Some("tvmonitor".to_string()),
    );
    check(got == want, || format!("VOC fixture split {got:?}"))?;
    check(split.seen.len() == 17, || {
        format!("{} seen classes", split.seen.len())
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cases = 600;
    for case in 0..cases {
        let n = rng.random_range(1..=12usize);
        let names: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
        // Random DAG: edges only go from a lower to a higher position of a
        // shuffled order.
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let density = rng.random_range(0.0..0.5);
        let mut adj = vec![vec![false; n]; n];
        let mut tree = SemanticTree::default();
        for name in &names {
            tree.add_node(name);
        }
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(density) {
                    let (p, c) = (order[i], order[j]);
                    adj[p][c] = true;
                    tree.add_edge(&names[p], &names[c]);
                }
            }
        }
        // Transitive closure.
        let mut reach = adj.clone();
        for (i, row) in reach.iter_mut().enumerate() {
            row[i] = true;
        }
        for k in 0..n {
            for i in 0..n {
                if reach[i][k] {
                    let via = reach[k].clone();
                    for (dst, r) in reach[i].iter_mut().zip(via) {
                        *dst |= r;
                    }
                }
            }
        }
        let mut reference: BTreeSet<String> = names
            .iter()
            .filter(|_| rng.random_bool(0.25))
            .cloned()
            .collect();
        if rng.random_bool(0.3) {
            reference.insert("missing".into());
        }
        let refs: Vec<usize> = (0..n).filter(|&i| reference.contains(&names[i])).collect();
        let expect: BTreeSet<String> = (0..n)
            .filter(|&x| refs.iter().any(|&r| reach[r][x] || reach[x][r]))
            .map(|x| names[x].clone())
            .collect();
        let got = excluded_classes(&tree, &reference);
        check(got.excluded == expect, || {
            format!(
                "case {case}: excluded {:?}, oracle {expect:?}",
                got.excluded
            )
        })?;
        let kept: BTreeSet<String> = names
            .iter()
            .filter(|x| !expect.contains(*x))
            .cloned()
            .collect();
        check(got.kept == kept, || {
            format!("case {case}: kept sets differ")
        })?;
        check(
            got.warnings.len() == usize::from(reference.contains("missing")),
            || format!("case {case}: warnings {:?}", got.warnings),
        )?;
    }
    Ok(format!("VOC fixture -> cow / boat / tvmonitor; {cases} random DAGs (<=12 nodes) match the reachability oracle"))
}

// ---------------------------------------------------------------------------
// 9. Downstream consistency.

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m_values = vec![1, 2, 3, 5, 10];
    let cfg = DownstreamConfig {
        m_values: m_values.clone(),
        padding: 0.0,
        max_attempts: 1,
    };
    let fixtures = 120;
    for case in 0..fixtures {
        let n = rng.random_range(1..8);
        let images: Vec<DownstreamImage> = (0..n)
            .map(|i| {
                let (w, h) = (rng.random_range(24..80u32), rng.random_range(24..80u32));
                let x = rng.random_range(0.0..w as f64 - 10.0);
                let y = rng.random_range(0.0..h as f64 - 10.0);
                let bw = rng.random_range(8.0..=(w as f64 - x).max(8.0));
                let bh = rng.random_range(8.0..=(h as f64 - y).max(8.0));
                DownstreamImage {
                    image_id: i as u64 + 1,
                    pixels: image::RgbImage::from_fn(w, h, |px, py| {
                        image::Rgb([px as u8, py as u8, i as u8])
                    }),
                    truth_box: agnostic_det::geometry::clip_box(
                        &BoundingBox::from_xywh(x, y, bw, bh),
                        w as f64,
                        h as f64,
                    ),
                    truth_label: format!("label{}", rng.random_range(0..4)),
                }
            })
            .collect();
        let truths = images
            .iter()
            .map(|i| (i.image_id, (i.truth_box, i.truth_label.clone())))
            .collect();

        let gt: BTreeMap<ImageId, Vec<Detection>> = images
            .iter()
            .map(|i| {
                (
                    i.image_id,
                    vec![Detection::agnostic(i.image_id, i.truth_box, 1.0)],
                )
            })
            .collect();
        let (report, _) = evaluate_downstream(&images, &gt, &mut IouOracle::new(truths), &cfg)
            .map_err(|e| e.to_string())?;
        let gt_crop = report.ground_truth_crop_accuracy.unwrap_or(0.0);
        check(
            report.accuracy_at_m[&1] == 1.0 && report.bo_accuracy == 1.0 && gt_crop == 1.0,
            || {
                format!(
                    "case {case}: ground-truth detections give Acc@1 {} BO {} GT-crop {gt_crop}",
                    report.accuracy_at_m[&1], report.bo_accuracy
                )
            },
        )?;

        // Random detections, sometimes including a jittered truth box.
        let truths = images
            .iter()
            .map(|i| (i.image_id, (i.truth_box, i.truth_label.clone())))
            .collect();
        let random: BTreeMap<ImageId, Vec<Detection>> = images
            .iter()
            .map(|img| {
                let (w, h) = img.pixels.dimensions();
                let dets = (0..rng.random_range(0..12))
                    .map(|_| {
                        let b = if rng.random_bool(0.3) {
                            img.truth_box
                                .translate(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
                        } else {
                            let x = rng.random_range(0.0..w as f64 - 4.0);
                            let y = rng.random_range(0.0..h as f64 - 4.0);
                            BoundingBox::new(
                                x,
                                y,
                                x + rng.random_range(2.0..30.0),
                                y + rng.random_range(2.0..30.0),
                            )
                        };
                        Detection::agnostic(img.image_id, b, rng.random_range(0.0..1.0))
                    })
                    .collect();
                (img.image_id, dets)
            })
            .collect();
        let (report, _) = evaluate_downstream(&images, &random, &mut IouOracle::new(truths), &cfg)
            .map_err(|e| e.to_string())?;
        let accs: Vec<f64> = m_values.iter().map(|m| report.accuracy_at_m[m]).collect();
        check(accs.windows(2).all(|w| w[0] <= w[1]), || {
            format!("case {case}: Acc@M not monotone: {accs:?}")
        })?;
        let gt_crop = report.ground_truth_crop_accuracy.unwrap_or(0.0);
        check(report.bo_accuracy <= gt_crop && accs[0] <= gt_crop, || {
            format!("case {case}: crop accuracies exceed the ground-truth crop")
        })?;
    }
    Ok(format!(
        "{fixtures} random fixtures: GT boxes give 1.0 everywhere, Acc@M monotone in M"
    ))
}

// ---------------------------------------------------------------------------
// 10. End-to-end smoke over every variant and mode.

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let make = |name: &str, n: usize, seed: u64| -> Result<(), String> {
        let cfg = ShapesConfig {
            num_images: n,
            seed,
            min_objects: 1,
            max_objects: 3,
            ..ShapesConfig::default()
        };
        let (index, store) = generate_shapes(&cfg).map_err(|e| e.to_string())?;
        let out = root.join(name);
        store.save_to_dir(&index, &out).map_err(|e| e.to_string())?;
        save_coco_json(&index, &out.join("annotations.json")).map_err(|e| e.to_string())
    };
    make("train", 24, 1)?;
    make("eval", 8, 2)?;
    let mut reports = Vec::new();
    let mut runs = 0;
    let start = Instant::now();
    for (mode, parsed_mode) in [("one_stage", Mode::OneStage), ("two_stage", Mode::TwoStage)] {
        for v in Variant::ALL {
            if v.check_mode(parsed_mode).is_err() {
                continue;
            }
            let text = format!(
                r#"
variant = "{}"
mode = "{mode}"
seed = 3
split = {{ seen = ["circle", "square", "triangle"], unseen_easy = "cross", unseen_medium = "ring" }}
[data]
train = "train/annotations.json"
eval = "eval/annotations.json"
[train]
steps = 20
pretrain_steps = 20
[optim]
batch_size = 4
[eval]
k_values = [3, 10, 100]
"#,
                v.name()
            );
            let cfg_path = root.join(format!("{mode}_{}.toml", v.name()));
            std::fs::write(&cfg_path, text).map_err(|e| e.to_string())?;
            let cfg = ExperimentConfig::load(&cfg_path).map_err(|e| e.to_string())?;
            let (trained, _) =
                train_experiment(&cfg, None).map_err(|e| format!("{}: {e}", cfg.display_name()))?;
            check(trained.model_updates == 20, || {
                format!(
                    "{}: {} model updates",
                    cfg.display_name(),
                    trained.model_updates
                )
            })?;
            let ckpt_path = root.join(format!("{mode}_{}.json", v.name()));
            Checkpoint::from_model(
                &trained.model,
                Some(v.name()),
                trained.global_step,
                trained.model_updates,
            )
            .save(&ckpt_path)
            .map_err(|e| e.to_string())?;
            let reloaded = Checkpoint::load(&ckpt_path)
                .and_then(|c| c.to_model())
                .map_err(|e| e.to_string())?;
            check(
                reloaded.weights.to_flat() == trained.model.weights.to_flat(),
                || format!("{}: checkpoint round trip", cfg.display_name()),
            )?;
            let report = evaluate_experiment(&cfg, &reloaded)
                .map_err(|e| format!("{}: {e}", cfg.display_name()))?;
            for (i, h) in report.harmonic_mean.recalls.iter().enumerate() {
                let expect = harmonic_mean_value(
                    report.macro_seen.recalls[i],
                    report.macro_unseen.recalls[i],
                );
                check((h - expect).abs() < 1e-12, || {
                    format!("{}: HM column inconsistent", cfg.display_name())
                })?;
            }
            reports.push(report);
            runs += 1;
        }
    }
    let out = root.join("report");
    let files = emit_report(
        &reports,
        &[ReportFormat::Json, ReportFormat::Table, ReportFormat::Plots],
        &out,
    )
    .map_err(|e| e.to_string())?;
    let json_path = out.join("report.json");
    let back = reports_from_json(
        &std::fs::read_to_string(&json_path).map_err(|e| e.to_string())?,
        &json_path,
    )
    .map_err(|e| e.to_string())?;
    check(back == reports, || "JSON report does not round-trip".into())?;
    let table = std::fs::read_to_string(out.join("report.txt")).map_err(|e| e.to_string())?;
    check(table_is_consistent(&table), || {
        format!("table HM columns inconsistent:\n{table}")
    })?;
    for name in ["SSD-ag-ad", "FRCNN-aw-prop", "FRCNN-ft-ag-ad"] {
        check(table.contains(name), || format!("table lacks {name}"))?;
    }
    for svg in ["ar_macro.svg", "ar_difficulty.svg"] {
        let s = std::fs::read_to_string(out.join(svg)).map_err(|e| e.to_string())?;
        check(
            s.starts_with("<svg") && s.trim_end().ends_with("</svg>"),
            || format!("{svg} is not an SVG document"),
        )?;
    }
    Ok(format!("{runs} variant/mode runs trained, checkpointed, reloaded and evaluated; {} report files in {:.1?}", files.len(), start.elapsed()))
}

fn main() {
    type Criterion = (u32, &'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        (1, "AR@k oracle equivalence", criterion_1),
        (2, "geometry properties", criterion_2),
        (3, "gradient checks", criterion_3),
        (4, "schedule and isolation", criterion_4),
        (5, "entropy bounds", criterion_5),
        (6, "alpha=0 equivalence", criterion_6),
        (7, "synthetic generalization analog", criterion_7),
        (8, "protocol fixtures", criterion_8),
        (9, "downstream consistency", criterion_9),
        (10, "end-to-end smoke", criterion_10),
    ];
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
