//! Experiment configuration: one TOML document, unknown keys rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversarial::trainer::{AdversarialConfig, OptimConfig};
use crate::detector::model::{HeadType, InferConfig, Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_IOU_THRESHOLD, DEFAULT_K_VALUES, DEFAULT_M_VALUES};
use crate::protocol::ClassSplit;

/// Model/training recipe, one per results-table row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Aware,
    Agnostic,
    FtAgnostic,
    AgnosticAdv,
    FtAgnosticAdv,
    AwareProposals,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Aware,
        Variant::Agnostic,
        Variant::FtAgnostic,
        Variant::AgnosticAdv,
        Variant::FtAgnosticAdv,
        Variant::AwareProposals,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Aware => "aware",
            Variant::Agnostic => "agnostic",
            Variant::FtAgnostic => "ft-agnostic",
            Variant::AgnosticAdv => "agnostic-adv",
            Variant::FtAgnosticAdv => "ft-agnostic-adv",
            Variant::AwareProposals => "aware-proposals",
        }
    }

    /// Head of the final model.
    pub fn head_type(self) -> HeadType {
        match self {
            Variant::Aware | Variant::AwareProposals => HeadType::ClassAware,
            _ => HeadType::ClassAgnostic,
        }
    }

    pub fn adversarial(self) -> bool {
        matches!(self, Variant::AgnosticAdv | Variant::FtAgnosticAdv)
    }

    /// Starts from a trained class-aware model.
    pub fn finetuned(self) -> bool {
        matches!(self, Variant::FtAgnostic | Variant::FtAgnosticAdv)
    }

    pub fn proposals(self) -> bool {
        self == Variant::AwareProposals
    }

    /// Row label: `SSD-`/`FRCNN-` prefix, then `aw`/`ag`, `ft-`, `-ad`, `-prop`.
    pub fn table_name(self, mode: Mode) -> String {
        let prefix = match mode {
            Mode::OneStage => "SSD",
            Mode::TwoStage => "FRCNN",
        };
        let body = match self {
            Variant::Aware => "aw",
            Variant::Agnostic => "ag",
            Variant::FtAgnostic => "ft-ag",
            Variant::AgnosticAdv => "ag-ad",
            Variant::FtAgnosticAdv => "ft-ag-ad",
            Variant::AwareProposals => "aw-prop",
        };
        format!("{prefix}-{body}")
    }

    pub fn check_mode(self, mode: Mode) -> Result<()> {
        if self.proposals() && mode != Mode::TwoStage {
            return Err(Error::Config(
                "variant `aware-proposals` requires mode = \"two_stage\"".into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Train on seen classes, evaluate seen and unseen classes.
    #[default]
    SeenUnseen,
    /// Train on one dataset, evaluate on the non-overlapping classes of another.
    NonOverlapping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    #[default]
    Toy,
    Micro,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training annotations (COCO JSON).
    pub train: PathBuf,
    /// Image directory; defaults to the annotation file's directory.
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    /// Evaluation annotations.
    pub eval: PathBuf,
    #[serde(default)]
    pub eval_images: Option<PathBuf>,
    /// Second dataset for cross-dataset recall on classes absent from training.
    #[serde(default)]
    pub cross: Option<PathBuf>,
    #[serde(default)]
    pub cross_images: Option<PathBuf>,
    /// Manual class-name alias table applied after normalization.
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: ModelPreset,
    /// Overrides the preset's head initialization scale.
    pub head_init_std: Option<f64>,
    /// Region-proposal cap at test time (two-stage).
    pub test_proposals: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: ModelPreset::Toy,
            head_init_std: None,
            test_proposals: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Detector (non-discriminator) updates; adversarial runs take
    /// `disc_steps_per_model_step + 1` global steps per update.
    pub steps: u64,
    /// Class-aware pretraining updates for the finetuned variants.
    pub pretrain_steps: Option<u64>,
    /// Class-aware checkpoint to finetune from instead of pretraining.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 200,
            pretrain_steps: None,
            init_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k_values: Vec<usize>,
    pub iou_threshold: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub pre_nms_top: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let infer = InferConfig::default();
        Self {
            k_values: DEFAULT_K_VALUES.to_vec(),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            nms_iou: infer.nms_iou,
            score_threshold: infer.score_threshold,
            pre_nms_top: infer.pre_nms_top,
        }
    }
}

impl EvalSection {
    pub fn infer_config(&self) -> InferConfig {
        InferConfig {
            nms_iou: self.nms_iou,
            score_threshold: self.score_threshold,
            pre_nms_top: self.pre_nms_top,
        }
    }

    pub fn max_k(&self) -> usize {
        self.k_values.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSection {
    pub m_values: Vec<usize>,
    /// Context padding as a fraction of box width/height on each side.
    pub padding: f64,
    /// Attempts per classifier request before an image is marked failed.
    pub max_attempts: usize,
}

impl Default for DownstreamSection {
    fn default() -> Self {
        Self {
            m_values: DEFAULT_M_VALUES.to_vec(),
            padding: 0.0,
            max_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExclusionSection {
    /// Exclusion JSON written by `build-exclusion`.
    #[serde(default)]
    pub file: Option<PathBuf>,
    /// Inline excluded class names, used when `file` is absent.
    #[serde(default)]
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub experiment: Experiment,
    pub variant: Variant,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    /// Inline seen/unseen split.
    #[serde(default)]
    pub split: Option<ClassSplit>,
    /// Split JSON written by `split-classes`, used when `split` is absent.
    #[serde(default)]
    pub split_file: Option<PathBuf>,
    #[serde(default)]
    pub exclusion: Option<ExclusionSection>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub adversarial: AdversarialConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub downstream: DownstreamSection,
}

fn default_mode() -> Mode {
    Mode::OneStage
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.train);
        fix(&mut self.data.eval);
        for p in [
            &mut self.data.train_images,
            &mut self.data.eval_images,
            &mut self.data.cross,
            &mut self.data.cross_images,
            &mut self.split_file,
            &mut self.train.init_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let Some(e) = &mut self.exclusion {
            if let Some(p) = &mut e.file {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.check_mode(self.mode)?;
        if self.eval.k_values.is_empty() || self.eval.k_values.contains(&0) {
            return Err(Error::Config(
                "eval.k_values must be non-empty positive integers".into(),
            ));
        }
        if self.eval.k_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "eval.k_values must be strictly increasing".into(),
            ));
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return Err(Error::Config(
                "eval.iou_threshold must lie in (0, 1]".into(),
            ));
        }
        if self.downstream.m_values.is_empty() || self.downstream.m_values.contains(&0) {
            return Err(Error::Config(
                "downstream.m_values must be non-empty positive integers".into(),
            ));
        }
        if !(self.downstream.padding >= 0.0 && self.downstream.padding.is_finite()) {
            return Err(Error::Config(
                "downstream.padding must be non-negative".into(),
            ));
        }
        if self.downstream.max_attempts == 0 {
            return Err(Error::Config(
                "downstream.max_attempts must be at least 1".into(),
            ));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be positive".into()));
        }
        self.adversarial.validate()?;
        match self.experiment {
            Experiment::SeenUnseen => {
                if self.split.is_none() && self.split_file.is_none() {
                    return Err(Error::Config(
                        "seen_unseen experiments need `split` or `split_file`".into(),
                    ));
                }
            }
            Experiment::NonOverlapping => {
                if self.exclusion.is_none() {
                    return Err(Error::Config(
                        "non_overlapping experiments need an [exclusion] section".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Architecture for `num_types` training classes.
    pub fn model_config(
        &self,
        head_type: HeadType,
        num_types: usize,
        type_class_ids: Vec<usize>,
    ) -> ModelConfig {
        let mut cfg = match self.model.preset {
            ModelPreset::Toy => ModelConfig::toy(self.mode, head_type, num_types),
            ModelPreset::Micro => ModelConfig::micro(self.mode, head_type, num_types),
        };
        cfg.type_class_ids = type_class_ids;
        if let Some(std) = self.model.head_init_std {
            cfg.head_init_std = std;
        }
        if let Some(n) = self.model.test_proposals {
            cfg.roi.test_proposals = n;
        }
        cfg
    }

    pub fn display_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.variant.table_name(self.mode))
    }
}
