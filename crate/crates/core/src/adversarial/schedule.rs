use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    UpdateDiscriminator,
    UpdateModel,
}

/// Repeating cycle of `disc_steps` discriminator updates followed by one
/// model update. With discriminator updates disabled every step updates the
/// model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub disc_steps: usize,
    pub enabled: bool,
}

impl Schedule {
    pub fn new(disc_steps: usize, enabled: bool) -> Self {
        assert!(
            disc_steps >= 1,
            "at least one discriminator step per model step"
        );
        Self {
            disc_steps,
            enabled,
        }
    }

    /// Action for the 1-based global step.
    pub fn action(&self, step: u64) -> Action {
        assert!(step >= 1);
        if !self.enabled {
            return Action::UpdateModel;
        }
        let period = self.disc_steps as u64 + 1;
        if step.is_multiple_of(period) {
            Action::UpdateModel
        } else {
            Action::UpdateDiscriminator
        }
    }

    /// Model updates among the first `steps` global steps.
    pub fn model_updates_within(&self, steps: u64) -> u64 {
        if self.enabled {
            steps / (self.disc_steps as u64 + 1)
        } else {
            steps
        }
    }
}
