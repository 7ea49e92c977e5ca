//! Object-type discriminators and the alternating adversarial trainer.

pub mod losses;
pub mod objective;
pub mod optim;
pub mod probe;
pub mod schedule;
pub mod trainer;

pub use losses::{discriminator_loss, entropy_penalty, model_loss, LossBreakdown};
pub use objective::{Discriminators, ImageSample, StepPlan};
pub use schedule::{Action, Schedule};
pub use trainer::{AdversarialConfig, OptimConfig, StepLog, Trainer};
