//! Alternating trainer: discriminator updates with the detector frozen,
//! detector updates with the discriminators frozen.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::losses::LossBreakdown;
use crate::adversarial::objective::{
    discriminator_objective_with_pass, make_plan, model_objective_with_pass, Discriminators,
    ImageSample, SamplingConfig,
};
use crate::adversarial::optim::Sgd;
use crate::adversarial::schedule::{Action, Schedule};
use crate::detector::model::{DetectorModel, ForwardPass};
use crate::detector::nn::Parameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialConfig {
    /// Weight of the negative-entropy term.
    pub alpha: f64,
    pub disc_steps_per_model_step: usize,
    /// Feed the discriminators foreground embeddings only.
    pub foreground_only: bool,
    /// When false the schedule never updates the discriminators.
    pub discriminator_enabled: bool,
    pub disc_hidden: usize,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            disc_steps_per_model_step: 5,
            foreground_only: true,
            discriminator_enabled: true,
            disc_hidden: Discriminators::DEFAULT_HIDDEN,
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be a finite non-negative number, got {}",
                self.alpha
            )));
        }
        if self.disc_steps_per_model_step < 1 {
            return Err(Error::Config(
                "disc_steps_per_model_step must be at least 1".into(),
            ));
        }
        if self.disc_hidden == 0 {
            return Err(Error::Config("disc_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub disc_lr: f64,
    pub disc_momentum: f64,
    pub max_grad_norm: Option<f64>,
    pub batch_size: usize,
    pub neg_per_pos: usize,
    pub min_negatives: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            disc_lr: 0.02,
            disc_momentum: 0.9,
            max_grad_norm: Some(10.0),
            batch_size: 8,
            neg_per_pos: 3,
            min_negatives: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub action: Action,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_loss: Option<f64>,
    /// Discriminator update skipped for lack of foreground embeddings.
    #[serde(default)]
    pub skipped: bool,
}

pub struct Trainer {
    pub model: DetectorModel,
    pub discriminators: Option<Discriminators>,
    pub adversarial: Option<AdversarialConfig>,
    pub optim: OptimConfig,
    schedule: Schedule,
    model_opt: Sgd,
    disc_opt: Sgd,
    batch_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub global_step: u64,
    pub model_updates: u64,
    pub disc_updates: u64,
    pub skipped_disc_updates: u64,
}

impl Trainer {
    /// `adversarial = None` is the plain detector trainer. Discriminator
    /// initialization draws from its own seed stream so it never shifts the
    /// batch order or the background sampling.
    pub fn new(
        model: DetectorModel,
        adversarial: Option<AdversarialConfig>,
        optim: OptimConfig,
        seed: u64,
    ) -> Result<Self> {
        if optim.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(a) = &adversarial {
            a.validate()?;
        }
        let discriminators = adversarial.as_ref().map(|a| {
            Discriminators::for_model(&model, a.disc_hidden, seed.wrapping_add(0x9e37_79b9))
        });
        let schedule = match &adversarial {
            Some(a) => Schedule::new(a.disc_steps_per_model_step, a.discriminator_enabled),
            None => Schedule::new(1, false),
        };
        Ok(Self {
            model_opt: Sgd::new(
                optim.lr,
                optim.momentum,
                optim.weight_decay,
                optim.max_grad_norm,
            ),
            disc_opt: Sgd::new(optim.disc_lr, optim.disc_momentum, 0.0, optim.max_grad_norm),
            model,
            discriminators,
            adversarial,
            optim,
            schedule,
            batch_rng: ChaCha8Rng::seed_from_u64(seed),
            sample_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5555_aaaa_5555_aaaa),
            order: Vec::new(),
            cursor: 0,
            global_step: 0,
            model_updates: 0,
            disc_updates: 0,
            skipped_disc_updates: 0,
        })
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let size = self.optim.batch_size.min(n);
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.batch_rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    fn forward_batch(&self, data: &[ImageSample], batch: &[usize]) -> Result<Vec<ForwardPass>> {
        batch
            .par_iter()
            .map(|&i| self.model.forward(&data[i].image))
            .collect()
    }

    pub fn step(&mut self, data: &[ImageSample]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        self.global_step += 1;
        let action = self.schedule.action(self.global_step);
        let batch = self.next_batch(data.len());
        let sampling = SamplingConfig {
            neg_per_pos: self.optim.neg_per_pos,
            min_negatives: self.optim.min_negatives,
        };
        let mut log = StepLog {
            step: self.global_step,
            action,
            loss: None,
            disc_loss: None,
            skipped: false,
        };
        match action {
            Action::UpdateModel => {
                let (alpha, fg_only) = self
                    .adversarial
                    .as_ref()
                    .map(|a| (a.alpha, a.foreground_only))
                    .unwrap_or((0.0, true));
                let passes = self.forward_batch(data, &batch)?;
                let mut plans = Vec::with_capacity(batch.len());
                for (&i, pass) in batch.iter().zip(&passes) {
                    plans.push(make_plan(
                        &self.model,
                        &data[i],
                        pass,
                        &sampling,
                        &mut self.sample_rng,
                    )?);
                }
                let (model, discs) = (&self.model, self.discriminators.as_ref());
                let objectives = batch
                    .par_iter()
                    .zip(&passes)
                    .zip(&plans)
                    .map(|((&i, pass), plan)| {
                        model_objective_with_pass(
                            model, discs, &data[i], plan, pass, alpha, fg_only, true,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                // Summed in batch order so results do not depend on thread count.
                let mut acc = self.model.weights.zeros_like();
                let mut total = LossBreakdown::default();
                for obj in &objectives {
                    acc.add_scaled(obj.grads.as_ref().expect("requested"), 1.0);
                    total.objectness += obj.loss.objectness;
                    total.regression += obj.loss.regression;
                    total.entropy += obj.loss.entropy;
                    total.foreground += obj.loss.foreground;
                }
                let n = batch.len() as f64;
                let mut grads = self.model.weights.zeros_like();
                grads.add_scaled(&acc, 1.0 / n);
                self.model_opt.step(&mut self.model.weights, &grads);
                self.model_updates += 1;
                log.loss = Some(LossBreakdown::new(
                    total.objectness / n,
                    total.regression / n,
                    total.entropy / n,
                    alpha,
                    total.foreground,
                ));
            }
            Action::UpdateDiscriminator => {
                let discs = self
                    .discriminators
                    .as_ref()
                    .expect("adversarial schedule has discriminators");
                let passes = self.forward_batch(data, &batch)?;
                let mut plans = Vec::with_capacity(batch.len());
                for (&i, pass) in batch.iter().zip(&passes) {
                    plans.push(make_plan(
                        &self.model,
                        &data[i],
                        pass,
                        &sampling,
                        &mut self.sample_rng,
                    )?);
                }
                let model = &self.model;
                let objectives = batch
                    .par_iter()
                    .zip(&passes)
                    .zip(&plans)
                    .map(|((&i, pass), plan)| {
                        discriminator_objective_with_pass(model, discs, &data[i], plan, pass, true)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut acc = discs.zeros_like();
                let mut losses = Vec::new();
                for obj in objectives {
                    if let (Some(l), Some(g)) = (obj.loss, obj.grads) {
                        losses.push(l);
                        acc.add_scaled(&g, 1.0);
                    }
                }
                if losses.is_empty() {
                    self.skipped_disc_updates += 1;
                    log.skipped = true;
                } else {
                    let n = losses.len() as f64;
                    let mut grads = acc.zeros_like();
                    grads.add_scaled(&acc, 1.0 / n);
                    let discs = self.discriminators.as_mut().expect("checked above");
                    self.disc_opt.step(discs, &grads);
                    self.disc_updates += 1;
                    log.disc_loss = Some(losses.iter().sum::<f64>() / n);
                }
            }
        }
        Ok(log)
    }

    /// Runs `steps` global steps, writing one JSON line per step to `log`.
    pub fn run(
        &mut self,
        data: &[ImageSample],
        steps: u64,
        mut log: Option<&mut (dyn Write + '_)>,
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let entry = self.step(data)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &entry)?;
                w.write_all(b"\n")?;
            }
            logs.push(entry);
        }
        Ok(logs)
    }

    /// Global steps needed for `model_updates` detector updates.
    pub fn steps_for_model_updates(&self, model_updates: u64) -> u64 {
        if self.schedule.enabled {
            model_updates * (self.schedule.disc_steps as u64 + 1)
        } else {
            model_updates
        }
    }
}
