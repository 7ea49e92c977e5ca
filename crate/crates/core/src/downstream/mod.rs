//! Downstream utility: classify crops cut by detected boxes.

pub mod classifier;
pub mod crops;
pub mod evaluate;

pub use classifier::{ClassifierClient, IouOracle, SocketClassifier};
pub use crops::{make_crops, CropSpec};
pub use evaluate::{downstream_images, evaluate_downstream, DownstreamConfig, DownstreamImage};
