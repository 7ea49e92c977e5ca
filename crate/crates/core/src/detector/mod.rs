pub mod anchors;
pub mod assign;
pub mod boxcoder;
pub mod checkpoint;
pub mod model;
pub mod nms;
pub mod nn;

pub use anchors::{generate_anchors, AnchorGrid, AnchorLevel, LevelConfig};
pub use assign::{assign_targets, sample_for_loss, AssignConfig, TargetAssignment};
pub use boxcoder::{decode_box, encode_box};
pub use checkpoint::Checkpoint;
pub use model::{
    image_to_tensor, DetectorModel, DetectorWeights, HeadType, InferConfig, Mode, ModelConfig,
};
pub use nms::nms;
