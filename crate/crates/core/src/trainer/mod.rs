//! Adversarial training with warm-up of attention gradient dropping and
//! perturbation masking.
//!
//! Per batch: the clean images are cropped/flipped, attacked with gated and
//! masked PGD, optionally mixed (Mixup/CutMix on the adversarial images),
//! and the parameters take one clipped optimizer step on the ungated
//! cross-entropy.
//!
//! Random streams, all derived from the config seed `S`:
//! stream 0 initializes parameters, stream 1 drives shuffling, augmentation
//! and mixing, stream 2 samples gates, and the attack of batch `(t, a)` uses
//! `mix_seed(S, [t, a])` with one substream per example.

mod clip;
mod mix;
mod optim;
mod schedule;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use clip::{clip_global_norm, global_norm};
pub use mix::{cut_box, cut_size, cutmix, cutmix_with, mixup, mixup_with, CutBox};
pub use optim::{adamw_update, sgd_update, AdamHyper, OptimizerConfig, OptimizerState};
pub use schedule::LrSchedule;

use crate::attacks::{argmax, pgd_attack, AttackConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{augment_basic, one_hot, Dataset};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{mix_seed, RngState};
use crate::tensor::Tensor;
use crate::vit::{ModelParams, ViT, ViTConfig};
use crate::warmup::{sample_gates, WarmupMode, WarmupSchedule};

pub const INIT_STREAM: u64 = 0;
pub const MAIN_STREAM: u64 = 1;
pub const GATE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    /// `n_w`; zero disables warm-up regardless of mode.
    #[serde(default)]
    pub epochs: usize,
    #[serde(default)]
    pub mode: WarmupMode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Zero padding for random crops; `None` disables cropping.
    #[serde(default)]
    pub crop_pad: Option<usize>,
    #[serde(default)]
    pub hflip: bool,
    /// Beta parameter for Mixup; `None` disables it.
    #[serde(default)]
    pub mixup: Option<f64>,
    #[serde(default)]
    pub cutmix: Option<f64>,
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Global ℓ2 clipping threshold; `null` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub warmup: WarmupConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        self.optimizer.validate()?;
        self.lr_schedule.validate(self.epochs)?;
        self.attack.validate()?;
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::validation(format!("clip_norm must be positive, got {c}")));
            }
        }
        for (name, alpha) in [("mixup", self.augment.mixup), ("cutmix", self.augment.cutmix)] {
            if alpha.is_some_and(|a| !(a > 0.0 && a.is_finite())) {
                return Err(Error::validation(format!("{name} alpha must be positive")));
            }
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }

    pub fn warmup_schedule(&self, examples: usize) -> Result<WarmupSchedule> {
        WarmupSchedule::new(self.warmup.epochs, self.batches_per_epoch(examples).max(1), self.warmup.mode)
    }
}

/// One optimizer step as seen by an observer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub pre_clip_norm: f64,
    pub post_clip_norm: f64,
    pub lr: f64,
    pub p: f64,
    pub k: f64,
}

/// One metrics line per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_robust_acc: f64,
    /// Learning rate at the first batch of the epoch.
    pub lr: f64,
    /// Mean pre-clip gradient norm.
    pub grad_norm_mean: f64,
    /// Drop probability at the first batch of the epoch.
    pub p: f64,
    pub wall_ms: u64,
}

pub trait TrainObserver<T> {
    fn on_step(&mut self, _step: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called after each epoch with the state reached so far.
    fn on_epoch(&mut self, _metrics: &EpochMetrics, _checkpoint: &Checkpoint<T>) -> Result<()> {
        Ok(())
    }
}

impl<T> TrainObserver<T> for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub metrics: Vec<EpochMetrics>,
}

fn add_into<T: Real>(acc: &mut ModelParams<T>, g: &ModelParams<T>) {
    for (a, b) in acc.slots_mut().into_iter().zip(g.slots()) {
        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x = *x + y);
    }
}

fn add_images<T: Real>(x: &Tensor<T>, d: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().zip(d.data()).map(|(&a, &b)| a + b).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Runs adversarial training. `initial` supplies starting parameters
/// (a warm start); otherwise they are drawn from the init stream. The
/// optimizer state and epoch counter always start fresh.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    model_cfg: &ViTConfig,
    dataset: &Dataset,
    initial: Option<&ModelParams<T>>,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if dataset.image_shape() != model_cfg.image_shape() {
        return Err(Error::validation(format!(
            "dataset images are {:?} but the model expects {:?}",
            dataset.image_shape(),
            model_cfg.image_shape()
        )));
    }
    if dataset.classes() != model_cfg.num_classes {
        return Err(Error::validation(format!(
            "dataset has {} classes but the model has {}",
            dataset.classes(),
            model_cfg.num_classes
        )));
    }

    let params = match initial {
        Some(p) => p.clone(),
        None => ModelParams::init(model_cfg, &mut RngState::with_stream(cfg.seed, INIT_STREAM)),
    };
    let mut model = ViT::new(model_cfg.clone(), params)?;
    let mut state = cfg.optimizer.init_state::<T>(model_cfg);
    let mut rng = RngState::with_stream(cfg.seed, MAIN_STREAM);
    let mut gate_rng = RngState::with_stream(cfg.seed, GATE_STREAM);

    let n = dataset.len();
    let batches = cfg.batches_per_epoch(n);
    let warmup = cfg.warmup_schedule(n)?;
    let classes = model_cfg.num_classes;
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);

        let (mut loss_sum, mut correct, mut norm_sum) = (0.0, 0usize, 0.0);
        let mut first = None;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let levels = warmup.levels(epoch, batch)?;
            // Always materialized: with p = 0 every gate is open and the
            // backward pass is unchanged.
            let gates = sample_gates(levels.drop_prob, model_cfg.depth, &mut gate_rng);

            let clean: Vec<Tensor<T>> = idx
                .iter()
                .map(|&i| {
                    let x = dataset.image::<T>(i);
                    match (cfg.augment.crop_pad, cfg.augment.hflip) {
                        (None, false) => x,
                        (pad, flip) => augment_basic(&x, pad.unwrap_or(0), flip, &mut rng),
                    }
                })
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.label(i)).collect();
            let deltas = pgd_attack(
                &model,
                &clean,
                &labels,
                &cfg.attack,
                Some(&gates),
                levels.mask_fraction,
                mix_seed(cfg.seed, &[epoch as u64, batch as u64]),
            )?;
            let adv: Vec<Tensor<T>> = clean.iter().zip(&deltas).map(|(x, d)| add_images(x, d)).collect();

            let mut inputs = adv.clone();
            let mut targets: Vec<Tensor<T>> = labels.iter().map(|&y| one_hot(y, classes)).collect();
            let mixing = match (cfg.augment.mixup, cfg.augment.cutmix) {
                (Some(a), Some(b)) => {
                    if rng.bernoulli(0.5) {
                        mixup(&mut inputs, &mut targets, a, &mut rng)?
                    } else {
                        cutmix(&mut inputs, &mut targets, b, &mut rng)?
                    }
                }
                (Some(a), None) => mixup(&mut inputs, &mut targets, a, &mut rng)?,
                (None, Some(b)) => cutmix(&mut inputs, &mut targets, b, &mut rng)?,
                (None, None) => None,
            };

            let results: Vec<(T, Tensor<T>, ModelParams<T>)> = inputs
                .par_iter()
                .zip(targets.par_iter())
                .map(|(x, y)| model.loss_and_grads(x, y))
                .collect::<Result<_>>()?;

            let m = idx.len();
            let inv = T::from_f64_lossy(1.0 / m as f64);
            let mut grads = ModelParams::zeros_like(model_cfg);
            let mut batch_loss = 0.0;
            for (loss, _, g) in &results {
                batch_loss += loss.to_f64().unwrap_or(f64::NAN);
                add_into(&mut grads, g);
            }
            batch_loss /= m as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, batch, what: format!("training loss is {batch_loss}") });
            }
            for t in grads.slots_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = *v * inv);
            }

            correct += if mixing.is_some() {
                adv.par_iter()
                    .zip(labels.par_iter())
                    .map(|(x, &y)| model.logits(x, None).map(|l| (argmax(l.data()) == y) as usize))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .sum::<usize>()
            } else {
                results.iter().zip(&labels).filter(|((_, l, _), &y)| argmax(l.data()) == y).count()
            };

            let mut slots = grads.slots_mut();
            let pre = match cfg.clip_norm {
                Some(c) => clip_global_norm(&mut slots, c)
                    .map_err(|e| Error::Diverged { epoch, batch, what: e.to_string() })?,
                None => global_norm(&slots.iter().map(|g| &**g).collect::<Vec<_>>()),
            };
            if !pre.is_finite() {
                return Err(Error::Diverged { epoch, batch, what: format!("gradient norm is {pre}") });
            }
            let post = global_norm(&grads.slots());

            let lr = cfg.lr_schedule.lr_at(cfg.optimizer.base_lr(), epoch, batch, batches, cfg.epochs);
            state.step(&cfg.optimizer, &mut model.params, &grads, lr)?;

            loss_sum += batch_loss * m as f64;
            norm_sum += pre;
            if first.is_none() {
                first = Some((lr, levels.drop_prob));
            }
            observer.on_step(&StepRecord {
                epoch,
                batch,
                loss: batch_loss,
                pre_clip_norm: pre,
                post_clip_norm: post,
                lr,
                p: levels.drop_prob,
                k: levels.mask_fraction,
            })?;
        }

        let (lr, p) = first.expect("at least one batch");
        let record = EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            train_robust_acc: correct as f64 / n as f64,
            lr,
            grad_norm_mean: norm_sum / batches as f64,
            p,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        let snapshot = Checkpoint {
            config: model_cfg.clone(),
            params: model.params.clone(),
            optimizer: Some(state.clone()),
            rng: rng.snapshot(),
            epoch: epoch as u64 + 1,
        };
        observer.on_epoch(&record, &snapshot)?;
        metrics.push(record);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: model_cfg.clone(),
            params: model.params,
            optimizer: Some(state),
            rng: rng.snapshot(),
            epoch: cfg.epochs as u64,
        },
        metrics,
    })
}
