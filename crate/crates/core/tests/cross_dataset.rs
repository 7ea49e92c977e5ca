//! Experiment II on a miniature pair of datasets: train on one, evaluate on
//! the classes of the other that the hierarchy does not relate to it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use agnostic_det::dataset::{DatasetIndex, Detection};
use agnostic_det::detector::model::{DetectorModel, HeadType, Mode, ModelConfig};
use agnostic_det::geometry::BoundingBox;
use agnostic_det::metrics::ar_at_k;
use agnostic_det::pipeline::coco::save_coco_json;
use agnostic_det::pipeline::config::ExperimentConfig;
use agnostic_det::pipeline::experiment::{
    evaluate_experiment, non_overlapping_report, run_experiment,
};
use agnostic_det::pipeline::shapes::{generate_shapes, ShapesConfig};
use agnostic_det::protocol::{excluded_classes, SemanticTree};

fn hierarchy() -> SemanticTree {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/shapes_hierarchy.json");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    SemanticTree::from_open_images_json(&json, &BTreeMap::new(), &BTreeMap::new()).unwrap()
}

/// Names related to any reference class by ancestry in either direction,
/// found by checking every pair for a directed path.
fn oracle_excluded(tree: &SemanticTree, reference: &BTreeSet<String>) -> BTreeSet<String> {
    let path_exists = |from: &str, to: &str| {
        let mut stack = vec![from.to_string()];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if seen.insert(n.clone()) {
                for (child, parents) in &tree.parents {
                    if parents.contains(&n) {
                        stack.push(child.clone());
                    }
                }
            }
        }
        false
    };
    tree.nodes
        .iter()
        .filter(|x| {
            reference
                .iter()
                .any(|r| tree.nodes.contains(r) && (path_exists(r, x) || path_exists(x, r)))
        })
        .cloned()
        .collect()
}

fn write_dataset(dir: &Path, classes: &[&str], n: usize, seed: u64) -> DatasetIndex {
    let cfg = ShapesConfig {
        num_images: n,
        seed,
        classes: classes.iter().map(|c| c.to_string()).collect(),
        ..ShapesConfig::default()
    };
    let (index, store) = generate_shapes(&cfg).unwrap();
    store.save_to_dir(&index, dir).unwrap();
    save_coco_json(&index, &dir.join("annotations.json")).unwrap();
    index
}

#[test]
fn six_node_hierarchy_matches_the_oracle() {
    let tree = hierarchy();
    assert_eq!(tree.nodes.len(), 6);
    let reference: BTreeSet<String> = ["circle", "square"].iter().map(|s| s.to_string()).collect();
    let ex = excluded_classes(&tree, &reference);
    assert_eq!(ex.excluded, oracle_excluded(&tree, &reference));
    assert_eq!(
        ex.excluded,
        ["circle", "round", "shape"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    );
    assert_eq!(ex.warnings.len(), 1, "square is not in the hierarchy");
}

#[test]
fn evaluation_truths_follow_the_exclusion() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_dataset(&root.join("a"), &["circle", "square"], 6, 1);
    let eval = write_dataset(&root.join("b"), &["circle", "ring", "star"], 6, 2);

    let tree = hierarchy();
    let reference: BTreeSet<String> = ["circle", "square"].iter().map(|s| s.to_string()).collect();
    let excluded = excluded_classes(&tree, &reference).excluded;
    std::fs::write(
        root.join("exclusion.json"),
        serde_json::to_string(&excluded_classes(&tree, &reference)).unwrap(),
    )
    .unwrap();

    let cfg_text = r#"
experiment = "non_overlapping"
variant = "agnostic"
[data]
train = "a/annotations.json"
eval = "b/annotations.json"
[exclusion]
file = "exclusion.json"
[train]
steps = 4
[optim]
batch_size = 2
[eval]
k_values = [10, 100]
"#;
    std::fs::write(root.join("exp.toml"), cfg_text).unwrap();
    let cfg = ExperimentConfig::load(&root.join("exp.toml")).unwrap();
    let outcome = run_experiment(&cfg, None).unwrap();

    let oracle = oracle_excluded(&tree, &reference);
    let kept_truths = eval
        .annotations
        .iter()
        .filter(|a| !oracle.contains(&eval.vocabulary.names[a.class_id]))
        .count();
    let excluded_truths = eval.annotations.len() - kept_truths;
    assert!(kept_truths > 0 && excluded_truths > 0);
    assert_eq!(outcome.report.macro_unseen.num_truths, kept_truths);
    assert_eq!(outcome.report.macro_seen.num_truths, excluded_truths);
    let per_class: BTreeSet<&str> = outcome
        .report
        .per_class
        .keys()
        .map(String::as_str)
        .collect();
    assert_eq!(per_class, BTreeSet::from(["ring", "star"]));

    // The evaluation half alone reproduces the report for the same weights.
    let again = evaluate_experiment(&cfg, &outcome.trained.model).unwrap();
    assert_eq!(again, outcome.report);
    assert_eq!(excluded, oracle);
}

#[test]
fn perfect_detections_recall_every_kept_truth() {
    let dir = tempfile::tempdir().unwrap();
    let eval = write_dataset(dir.path(), &["circle", "ring", "star"], 5, 3);
    let excluded: BTreeSet<String> = ["circle", "round", "shape"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let preds: BTreeMap<u64, Vec<Detection>> = eval
        .annotations_by_image()
        .into_iter()
        .map(|(id, anns)| {
            (
                id,
                anns.iter()
                    .map(|a| Detection::agnostic(id, a.bbox, 1.0))
                    .collect(),
            )
        })
        .collect();
    let eval_cfg = agnostic_det::pipeline::config::EvalSection {
        k_values: vec![100],
        ..Default::default()
    };
    let report = non_overlapping_report("oracle", &preds, &eval, &excluded, &eval_cfg).unwrap();
    assert_eq!(report.macro_unseen.recalls, vec![1.0]);
    assert_eq!(report.macro_seen.recalls, vec![1.0]);

    // Dropping the detections of the kept classes leaves unseen recall at 0.
    let kept_only: BTreeMap<u64, Vec<Detection>> = eval
        .annotations_by_image()
        .into_iter()
        .map(|(id, anns)| {
            let dets = anns
                .iter()
                .filter(|a| excluded.contains(&eval.vocabulary.names[a.class_id]))
                .map(|a| Detection::agnostic(id, a.bbox, 1.0))
                .collect();
            (id, dets)
        })
        .collect();
    let report =
        non_overlapping_report("partial", &kept_only, &eval, &excluded, &eval_cfg).unwrap();
    assert_eq!(report.macro_unseen.recalls, vec![0.0]);
    let direct = ar_at_k(&kept_only, &eval, &[100], 0.5, None, None);
    assert!(direct.recalls[0] > 0.0 && direct.recalls[0] < 1.0);
}

#[test]
fn micro_model_runs_on_a_nonsquare_box_set() {
    // Guards the two-stage pooling path against boxes touching the border.
    let model = DetectorModel::new(
        ModelConfig::micro(Mode::TwoStage, HeadType::ClassAgnostic, 2),
        0,
    )
    .unwrap();
    let pass = model.forward(&ndarray::Array3::zeros((3, 16, 16))).unwrap();
    let boxes = [
        BoundingBox::new(0.0, 0.0, 16.0, 16.0),
        BoundingBox::new(15.0, 0.0, 16.0, 3.0),
    ];
    let roi = model.roi_forward(&pass, &boxes).unwrap();
    assert_eq!(roi.logits.nrows(), 2);
    assert!(roi.logits.iter().all(|v| v.is_finite()));
}
