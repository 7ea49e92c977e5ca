//! Dataset ingestion, experiment drivers, configuration and reports.

pub mod coco;
pub mod config;
pub mod experiment;
pub mod report;
pub mod shapes;

pub use coco::{load_coco_json, save_coco_json};
pub use config::{Experiment, ExperimentConfig, Variant};
pub use experiment::{run_experiment, run_experiment_i, run_experiment_ii};
pub use report::{emit_report, ReportFormat};
pub use shapes::{generate_shapes, ShapesConfig};
