use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vit::{ModelParams, ViTConfig};

fn default_sgd_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_sgd_wd() -> f64 {
    1e-4
}
fn default_adamw_lr() -> f64 {
    5e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_adamw_wd() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default = "default_sgd_lr")]
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default = "default_sgd_wd")]
        weight_decay: f64,
    },
    Adamw {
        #[serde(default = "default_adamw_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        #[serde(default = "default_adamw_wd")]
        weight_decay: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { lr: default_sgd_lr(), momentum: default_momentum(), weight_decay: default_sgd_wd() }
    }
}

impl OptimizerConfig {
    pub fn base_lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adamw { lr, .. } => *lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerConfig::Sgd { lr, momentum, weight_decay } => {
                if !(lr > 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0) {
                    return Err(Error::validation("sgd needs lr > 0, momentum in [0, 1), weight_decay ≥ 0"));
                }
            }
            OptimizerConfig::Adamw { lr, beta1, beta2, eps, weight_decay } => {
                if !(lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0)
                {
                    return Err(Error::validation(
                        "adamw needs lr > 0, betas in [0, 1), eps > 0, weight_decay ≥ 0",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn init_state<T: Real>(&self, config: &ViTConfig) -> OptimizerState<T> {
        match self {
            OptimizerConfig::Sgd { .. } => OptimizerState::Sgd { momentum: ModelParams::zeros_like(config) },
            OptimizerConfig::Adamw { .. } => OptimizerState::AdamW {
                step: 0,
                first: ModelParams::zeros_like(config),
                second: ModelParams::zeros_like(config),
            },
        }
    }
}

/// Per-parameter optimizer buffers, shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState<T> {
    Sgd { momentum: ModelParams<T> },
    AdamW { step: u64, first: ModelParams<T>, second: ModelParams<T> },
}

impl<T: Real> OptimizerState<T> {
    /// Applies one update with learning rate `lr` (the schedule's value, not
    /// the config's base rate).
    pub fn step(
        &mut self,
        cfg: &OptimizerConfig,
        params: &mut ModelParams<T>,
        grads: &ModelParams<T>,
        lr: f64,
    ) -> Result<()> {
        match (self, cfg) {
            (OptimizerState::Sgd { momentum: bufs }, &OptimizerConfig::Sgd { momentum, weight_decay, .. }) => {
                for ((p, g), b) in params.slots_mut().into_iter().zip(grads.slots()).zip(bufs.slots_mut()) {
                    sgd_update(p, g, b, lr, momentum, weight_decay);
                }
            }
            (
                OptimizerState::AdamW { step, first, second },
                &OptimizerConfig::Adamw { beta1, beta2, eps, weight_decay, .. },
            ) => {
                *step += 1;
                let hp = AdamHyper { lr, beta1, beta2, eps, weight_decay };
                for (((p, g), m), v) in params
                    .slots_mut()
                    .into_iter()
                    .zip(grads.slots())
                    .zip(first.slots_mut())
                    .zip(second.slots_mut())
                {
                    adamw_update(p, g, m, v, *step, &hp);
                }
            }
            _ => return Err(Error::contract("optimizer state does not match optimizer config")),
        }
        Ok(())
    }
}

/// `g' = g + wd·p; buf = μ·buf + g'; p -= lr·buf`
pub fn sgd_update<T: Real>(param: &mut Tensor<T>, grad: &Tensor<T>, buf: &mut Tensor<T>, lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for ((p, &g), b) in param.data_mut().iter_mut().zip(grad.data()).zip(buf.data_mut()) {
        let g = g + wd * *p;
        *b = mu * *b + g;
        *p = *p - lr * *b;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Decoupled weight decay followed by a bias-corrected Adam step. `step`
/// counts from 1.
pub fn adamw_update<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    first: &mut Tensor<T>,
    second: &mut Tensor<T>,
    step: u64,
    hp: &AdamHyper,
) {
    let lit = T::from_f64_lossy;
    let (lr, b1, b2, eps) = (lit(hp.lr), lit(hp.beta1), lit(hp.beta2), lit(hp.eps));
    let decay = T::one() - lr * lit(hp.weight_decay);
    let c1 = lit(1.0 - hp.beta1.powi(step as i32));
    let c2 = lit(1.0 - hp.beta2.powi(step as i32));
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(first.data_mut())
        .zip(second.data_mut())
    {
        *p = *p * decay;
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p = *p - lr * mhat / (vhat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[v]).unwrap()
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = scalar(1.0);
        let mut b = scalar(0.0);
        sgd_update(&mut p, &scalar(1.0), &mut b, 0.1, 0.0, 0.0);
        assert_eq!(p.item(), 0.9);
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut p = scalar(0.37);
        let mut b = scalar(0.0);
        sgd_update(&mut p, &scalar(0.0), &mut b, 0.1, 0.9, 0.0);
        assert_eq!(p.item(), 0.37);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let mut p = scalar(0.0);
        let mut b = scalar(0.0);
        sgd_update(&mut p, &scalar(1.0), &mut b, 0.1, 0.9, 0.0);
        assert!((p.item() + 0.1).abs() < 1e-15);
        sgd_update(&mut p, &scalar(1.0), &mut b, 0.1, 0.9, 0.0);
        assert!((p.item() + 0.29).abs() < 1e-15);
    }

    fn hp(lr: f64, wd: f64) -> AdamHyper {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd }
    }

    #[test]
    fn adamw_first_step_is_lr_sized() {
        for g in [1.0, -1.0] {
            let mut p = scalar(0.0);
            let (mut m, mut v) = (scalar(0.0), scalar(0.0));
            adamw_update(&mut p, &scalar(g), &mut m, &mut v, 1, &hp(1e-3, 0.0));
            // mhat = g, vhat = g², update = lr·g/(|g| + eps)
            let expected = -1e-3 * g / (1.0 + 1e-8);
            assert!((p.item() - expected).abs() < 1e-18, "{}", p.item());
        }
    }

    #[test]
    fn adamw_zero_grad_keeps_moments() {
        let mut p = scalar(0.5);
        let (mut m, mut v) = (scalar(0.0), scalar(0.0));
        adamw_update(&mut p, &scalar(0.0), &mut m, &mut v, 1, &hp(1e-3, 0.0));
        assert_eq!(p.item(), 0.5);
        assert_eq!((m.item(), v.item()), (0.0, 0.0));
    }

    #[test]
    fn adamw_decoupled_decay_only() {
        let mut p = scalar(2.0);
        let (mut m, mut v) = (scalar(0.0), scalar(0.0));
        adamw_update(&mut p, &scalar(0.0), &mut m, &mut v, 1, &hp(5e-4, 0.3));
        assert_eq!(p.item(), 2.0 * (1.0 - 5e-4 * 0.3));
        assert!((p.item() - 2.0 * (1.0 - 1.5e-4)).abs() < 1e-15);
    }

    #[test]
    fn state_kind_must_match() {
        let cfg = ViTConfig {
            image_size: 4,
            channels: 1,
            patch_size: 2,
            embed_dim: 4,
            num_heads: 1,
            depth: 1,
            mlp_ratio: 1.0,
            num_classes: 2,
        };
        let sgd = OptimizerConfig::default();
        let adam = OptimizerConfig::Adamw { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut state = sgd.init_state::<f64>(&cfg);
        let mut params = ModelParams::zeros_like(&cfg);
        let grads = ModelParams::zeros_like(&cfg);
        assert!(state.step(&adam, &mut params, &grads, 0.1).is_err());
        assert!(state.step(&sgd, &mut params, &grads, 0.1).is_ok());
    }
}
