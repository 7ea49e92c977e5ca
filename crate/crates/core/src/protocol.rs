//! Seen/unseen split selection from a confusion matrix and cross-dataset
//! class exclusion over a semantic hierarchy.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{DatasetIndex, Detection, ImageId};
use crate::error::{Error, Result};
use crate::geometry::iou;

/// Lowercases, drops punctuation, collapses whitespace, then applies the
/// manual alias table (keys compared in normalized form).
pub fn normalize_name(raw: &str, aliases: &BTreeMap<String, String>) -> String {
    let cleaned: String = raw
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    let canon = cleaned.split_whitespace().collect::<Vec<_>>().join(" ");
    if let Some(target) = aliases.get(&canon) {
        return target.clone();
    }
    aliases
        .iter()
        .find(|(k, _)| normalize_name(k, &BTreeMap::new()) == canon)
        .map(|(_, v)| v.clone())
        .unwrap_or(canon)
}

/// Rows are true classes, columns predicted classes. Background terms sit in
/// separate vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    /// Ground truths of each class that no detection matched.
    #[serde(default)]
    pub background_miss: Vec<u64>,
    /// Detections of each predicted class that matched no ground truth.
    #[serde(default)]
    pub background_fp: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: Vec<String>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![vec![0; n]; n],
            background_miss: vec![0; n],
            background_fp: vec![0; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.classes.len();
        if self.counts.len() != n || self.counts.iter().any(|r| r.len() != n) {
            return Err(Error::Data(format!("confusion matrix must be {n}x{n}")));
        }
        for (name, v) in [
            ("background_miss", &self.background_miss),
            ("background_fp", &self.background_fp),
        ] {
            if !v.is_empty() && v.len() != n {
                return Err(Error::Data(format!(
                    "{name} has length {} but there are {n} classes",
                    v.len()
                )));
            }
        }
        Ok(())
    }

    /// Builds a matrix from class-aware detections: pairs at IoU ≥ threshold
    /// are matched one-to-one in decreasing IoU order regardless of class.
    pub fn from_detections(
        truths: &DatasetIndex,
        predictions: &BTreeMap<ImageId, Vec<Detection>>,
        iou_threshold: f64,
        score_threshold: f64,
    ) -> Self {
        let mut cm = Self::zeros(truths.vocabulary.names.clone());
        for (image_id, anns) in truths.annotations_by_image() {
            let anns: Vec<_> = anns.into_iter().filter(|a| !a.is_crowd).collect();
            let dets: Vec<&Detection> = predictions
                .get(&image_id)
                .map(|d| {
                    d.iter()
                        .filter(|d| d.score >= score_threshold && d.class_id.is_some())
                        .collect()
                })
                .unwrap_or_default();
            let mut pairs = Vec::new();
            for (ti, a) in anns.iter().enumerate() {
                for (di, d) in dets.iter().enumerate() {
                    let v = iou(&a.bbox, &d.bbox);
                    if v >= iou_threshold {
                        pairs.push((v, ti, di));
                    }
                }
            }
            pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut t_used = vec![false; anns.len()];
            let mut d_used = vec![false; dets.len()];
            for (_, ti, di) in pairs {
                if t_used[ti] || d_used[di] {
                    continue;
                }
                t_used[ti] = true;
                d_used[di] = true;
                let pred = dets[di].class_id.expect("filtered above");
                if pred < cm.classes.len() {
                    cm.counts[anns[ti].class_id][pred] += 1;
                }
            }
            for (ti, a) in anns.iter().enumerate() {
                if !t_used[ti] {
                    cm.background_miss[a.class_id] += 1;
                }
            }
            for (di, d) in dets.iter().enumerate() {
                if !d_used[di] {
                    if let Some(c) = d.class_id.filter(|&c| c < cm.classes.len()) {
                        cm.background_fp[c] += 1;
                    }
                }
            }
        }
        cm
    }
}

/// Per-class F1. With `include_background`, missed truths count against
/// recall and unmatched detections against precision.
pub fn f1_scores(cm: &ConfusionMatrix, include_background: bool) -> Result<BTreeMap<String, f64>> {
    cm.validate()?;
    let n = cm.classes.len();
    let bg = |v: &Vec<u64>, i: usize| {
        if include_background {
            v.get(i).copied().unwrap_or(0)
        } else {
            0
        }
    };
    let mut out = BTreeMap::new();
    for c in 0..n {
        let tp = cm.counts[c][c] as f64;
        let row: u64 = cm.counts[c].iter().sum::<u64>() + bg(&cm.background_miss, c);
        let col: u64 = (0..n).map(|r| cm.counts[r][c]).sum::<u64>() + bg(&cm.background_fp, c);
        let p = if col == 0 { 0.0 } else { tp / col as f64 };
        let r = if row == 0 { 0.0 } else { tp / row as f64 };
        let f1 = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        out.insert(cm.classes[c].clone(), f1);
    }
    Ok(out)
}

/// Seen classes plus up to three held-out classes tagged by difficulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSplit {
    pub seen: BTreeSet<String>,
    pub unseen_easy: Option<String>,
    pub unseen_medium: Option<String>,
    pub unseen_hard: Option<String>,
}

impl ClassSplit {
    pub fn unseen(&self) -> BTreeSet<String> {
        [&self.unseen_easy, &self.unseen_medium, &self.unseen_hard]
            .into_iter()
            .flatten()
            .cloned()
            .collect()
    }

    /// `(difficulty, class)` pairs for the populated unseen slots.
    pub fn unseen_by_difficulty(&self) -> Vec<(&'static str, String)> {
        [
            ("easy", &self.unseen_easy),
            ("medium", &self.unseen_medium),
            ("hard", &self.unseen_hard),
        ]
        .into_iter()
        .filter_map(|(d, c)| c.clone().map(|c| (d, c)))
        .collect()
    }

    /// Checks the parts are disjoint and together cover `vocabulary`.
    pub fn validate_against(&self, vocabulary: &[String]) -> Result<()> {
        let unseen = self.unseen();
        let count = [&self.unseen_easy, &self.unseen_medium, &self.unseen_hard]
            .iter()
            .filter(|c| c.is_some())
            .count();
        if unseen.len() != count {
            return Err(Error::Data(
                "unseen classes repeat across difficulty slots".into(),
            ));
        }
        if let Some(c) = self.seen.intersection(&unseen).next() {
            return Err(Error::Data(format!("class `{c}` is both seen and unseen")));
        }
        let all: BTreeSet<String> = self.seen.union(&unseen).cloned().collect();
        let vocab: BTreeSet<String> = vocabulary.iter().cloned().collect();
        if all != vocab {
            let missing: Vec<_> = vocab.difference(&all).collect();
            let extra: Vec<_> = all.difference(&vocab).collect();
            return Err(Error::Data(format!(
                "split does not match vocabulary (missing {missing:?}, unknown {extra:?})"
            )));
        }
        Ok(())
    }
}

/// Hardest = highest F1, easiest = lowest, medium = lower median. Ties are
/// ordered alphabetically.
pub fn select_unseen(f1: &BTreeMap<String, f64>) -> Result<ClassSplit> {
    if f1.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 classes, got {}",
            f1.len()
        )));
    }
    if let Some((name, _)) = f1.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite F1 for `{name}`"
        )));
    }
    let mut ranked: Vec<(&String, f64)> = f1.iter().map(|(k, &v)| (k, v)).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let n = ranked.len();
    let easy = ranked[0].0.clone();
    let medium = ranked[(n - 1) / 2].0.clone();
    let hard = ranked[n - 1].0.clone();
    let seen = ranked
        .iter()
        .map(|(k, _)| (*k).clone())
        .filter(|k| *k != easy && *k != medium && *k != hard)
        .collect();
    Ok(ClassSplit {
        seen,
        unseen_easy: Some(easy),
        unseen_medium: Some(medium),
        unseen_hard: Some(hard),
    })
}

/// Class hierarchy as a DAG of child → parents edges.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SemanticTree {
    pub nodes: BTreeSet<String>,
    pub parents: BTreeMap<String, BTreeSet<String>>,
}

impl SemanticTree {
    pub fn add_node(&mut self, name: &str) {
        self.nodes.insert(name.to_string());
    }

    pub fn add_edge(&mut self, parent: &str, child: &str) {
        self.add_node(parent);
        self.add_node(child);
        self.parents
            .entry(child.to_string())
            .or_default()
            .insert(parent.to_string());
    }

    pub fn children(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut out: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for (child, parents) in &self.parents {
            for p in parents {
                out.entry(p.as_str()).or_default().insert(child.as_str());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        // Kahn's algorithm; leftovers mean a cycle.
        let children = self.children();
        let mut indegree: BTreeMap<&str, usize> =
            self.nodes.iter().map(|n| (n.as_str(), 0)).collect();
        for (child, parents) in &self.parents {
            *indegree.entry(child.as_str()).or_default() += parents.len();
        }
        let mut queue: VecDeque<&str> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(n, _)| *n)
            .collect();
        let mut visited = 0;
        while let Some(n) = queue.pop_front() {
            visited += 1;
            for &c in children.get(n).into_iter().flatten() {
                let d = indegree.get_mut(c).expect("child is a node");
                *d -= 1;
                if *d == 0 {
                    queue.push_back(c);
                }
            }
        }
        if visited != indegree.len() {
            return Err(Error::Data("class hierarchy contains a cycle".into()));
        }
        Ok(())
    }

    /// Parses the Open Images hierarchy JSON (nested `Subcategory` lists).
    /// `display_names` maps label ids (MIDs) to readable names; names are
    /// normalized with `aliases`.
    pub fn from_open_images_json(
        json: &Value,
        display_names: &BTreeMap<String, String>,
        aliases: &BTreeMap<String, String>,
    ) -> Result<Self> {
        fn walk(
            node: &Value,
            parent: Option<&str>,
            tree: &mut SemanticTree,
            names: &BTreeMap<String, String>,
            aliases: &BTreeMap<String, String>,
        ) -> Result<()> {
            let label = node
                .get("LabelName")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Data("hierarchy node without a string `LabelName`".into()))?;
            let display = names.get(label).map(String::as_str).unwrap_or(label);
            let name = normalize_name(display, aliases);
            match parent {
                Some(p) if p != name => tree.add_edge(p, &name),
                _ => tree.add_node(&name),
            }
            if let Some(subs) = node.get("Subcategory") {
                let subs = subs.as_array().ok_or_else(|| {
                    Error::Data(format!("`Subcategory` of `{label}` is not a list"))
                })?;
                for sub in subs {
                    walk(sub, Some(&name), tree, names, aliases)?;
                }
            }
            Ok(())
        }
        let mut tree = SemanticTree::default();
        walk(json, None, &mut tree, display_names, aliases)?;
        tree.validate()?;
        Ok(tree)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub excluded: BTreeSet<String>,
    pub kept: BTreeSet<String>,
    /// Reference classes that do not occur in the hierarchy.
    pub warnings: Vec<String>,
}

/// Every node equal to, above, or below some reference class is excluded.
pub fn excluded_classes(tree: &SemanticTree, reference: &BTreeSet<String>) -> Exclusion {
    let children = tree.children();
    let mut excluded = BTreeSet::new();
    let mut warnings = Vec::new();
    let mut went_up: BTreeSet<&str> = BTreeSet::new();
    let mut went_down: BTreeSet<&str> = BTreeSet::new();
    for r in reference {
        let Some(start) = tree.nodes.get(r) else {
            warnings.push(format!("reference class `{r}` not found in hierarchy"));
            continue;
        };
        let mut up = vec![start.as_str()];
        while let Some(n) = up.pop() {
            if went_up.insert(n) {
                excluded.insert(n.to_string());
                up.extend(
                    tree.parents
                        .get(n)
                        .into_iter()
                        .flatten()
                        .map(String::as_str),
                );
            }
        }
        let mut down = vec![start.as_str()];
        while let Some(n) = down.pop() {
            if went_down.insert(n) {
                excluded.insert(n.to_string());
                down.extend(children.get(n).into_iter().flatten().copied());
            }
        }
    }
    let kept = tree.nodes.difference(&excluded).cloned().collect();
    Exclusion {
        excluded,
        kept,
        warnings,
    }
}

/// Reads an Open Images class-description CSV (`MID,Display Name`).
pub fn parse_class_descriptions(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|line| {
            let (mid, name) = line.split_once(',')?;
            Some((
                mid.trim().to_string(),
                name.trim().trim_matches('"').to_string(),
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_examples() {
        let aliases = BTreeMap::from([("tv monitor".to_string(), "tvmonitor".to_string())]);
        assert_eq!(normalize_name("TV Monitor", &aliases), "tvmonitor");
        assert_eq!(normalize_name("dog", &aliases), "dog");
        assert_eq!(
            normalize_name("Sea turtle ", &BTreeMap::new()),
            "sea turtle"
        );
        assert_eq!(normalize_name("  Hot   dog!", &BTreeMap::new()), "hot dog");
    }

    fn cm(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
        let n = counts.len();
        ConfusionMatrix {
            classes: (0..n).map(|i| format!("c{i}")).collect(),
            counts,
            background_miss: vec![0; n],
            background_fp: vec![0; n],
        }
    }

    #[test]
    fn f1_examples() {
        let perfect = cm(vec![vec![5, 0], vec![0, 7]]);
        assert!(f1_scores(&perfect, true)
            .unwrap()
            .values()
            .all(|&v| v == 1.0));
        let zero_tp = cm(vec![vec![0, 3], vec![2, 4]]);
        assert_eq!(f1_scores(&zero_tp, true).unwrap()["c0"], 0.0);
        let three = cm(vec![vec![8, 1, 1], vec![2, 6, 2], vec![0, 0, 10]]);
        let f1 = f1_scores(&three, true).unwrap();
        assert!((f1["c0"] - 0.8).abs() < 1e-12);
        // Brute-force TP/FP/FN counts for class 1: tp 6, fp 1, fn 4.
        let (p, r) = (6.0 / 7.0, 6.0 / 10.0);
        assert!((f1["c1"] - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }

    #[test]
    fn background_terms_lower_f1() {
        let mut m = cm(vec![vec![5, 0], vec![0, 5]]);
        m.background_miss = vec![5, 0];
        let with = f1_scores(&m, true).unwrap();
        let without = f1_scores(&m, false).unwrap();
        assert!(with["c0"] < without["c0"]);
        assert_eq!(with["c1"], 1.0);
    }

    #[test]
    fn split_selection() {
        let f1 = BTreeMap::from([("a".into(), 0.9), ("b".into(), 0.5), ("c".into(), 0.1)]);
        let s = select_unseen(&f1).unwrap();
        assert_eq!(
            (
                s.unseen_hard.as_deref(),
                s.unseen_medium.as_deref(),
                s.unseen_easy.as_deref()
            ),
            (Some("a"), Some("b"), Some("c"))
        );
        assert!(s.seen.is_empty());
        let tied = BTreeMap::from([("a".into(), 0.5), ("b".into(), 0.5), ("c".into(), 0.5)]);
        let s = select_unseen(&tied).unwrap();
        assert_eq!(
            (
                s.unseen_easy.as_deref(),
                s.unseen_medium.as_deref(),
                s.unseen_hard.as_deref()
            ),
            (Some("a"), Some("b"), Some("c"))
        );
        assert!(select_unseen(&BTreeMap::from([("a".into(), 0.1), ("b".into(), 0.2)])).is_err());
    }

    #[test]
    fn even_count_uses_lower_median() {
        let f1: BTreeMap<String, f64> =
            (0..4).map(|i| (format!("k{i}"), i as f64 / 10.0)).collect();
        let s = select_unseen(&f1).unwrap();
        assert_eq!(s.unseen_medium.as_deref(), Some("k1"));
        assert_eq!(s.seen, names(&["k2"]));
    }

    fn chain() -> SemanticTree {
        let mut t = SemanticTree::default();
        t.add_edge("a", "b");
        t.add_edge("b", "c");
        t
    }

    #[test]
    fn chain_exclusion() {
        assert_eq!(
            excluded_classes(&chain(), &names(&["b"])).excluded,
            names(&["a", "b", "c"])
        );
        let none = excluded_classes(&chain(), &BTreeSet::new());
        assert!(none.excluded.is_empty());
        assert_eq!(none.kept, names(&["a", "b", "c"]));
        let missing = excluded_classes(&chain(), &names(&["zebra"]));
        assert_eq!(missing.warnings.len(), 1);
        assert!(missing.excluded.is_empty());
    }

    #[test]
    fn cycle_detection() {
        let mut t = chain();
        assert!(t.validate().is_ok());
        t.add_edge("c", "a");
        assert!(t.validate().is_err());
    }

    #[test]
    fn open_images_hierarchy_parsing() {
        let json: Value = serde_json::json!({
            "LabelName": "/m/root",
            "Subcategory": [
                {"LabelName": "/m/animal", "Subcategory": [{"LabelName": "/m/dog"}, {"LabelName": "/m/cat"}]},
                {"LabelName": "/m/tv"}
            ]
        });
        let names = parse_class_descriptions(
            "/m/root,Entity\n/m/animal,Animal\n/m/dog,Dog\n/m/cat,Cat\n/m/tv,\"TV Monitor\"",
        );
        let aliases = BTreeMap::from([("tv monitor".to_string(), "tvmonitor".to_string())]);
        let tree = SemanticTree::from_open_images_json(&json, &names, &aliases).unwrap();
        assert_eq!(
            tree.nodes,
            self::names(&["entity", "animal", "dog", "cat", "tvmonitor"])
        );
        assert_eq!(tree.parents["dog"], self::names(&["animal"]));
        let ex = excluded_classes(&tree, &self::names(&["dog"]));
        assert_eq!(ex.kept, self::names(&["cat", "tvmonitor"]));
    }
}
