//! ℓ∞ white-box attacks and robust-accuracy evaluation.
//!
//! Images live in raw pixel space `[0, 1]`. Every PGD step projects back
//! onto the ε-ball and the image box.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{one_hot, Dataset};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{mix_seed, RngState};
use crate::tensor::Tensor;
use crate::vit::{Classifier, GateVector};
use crate::warmup::{expand_mask, sample_patch_mask, PatchMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    CwMargin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// ℓ∞ radius in pixel units.
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub loss: LossKind,
    pub random_init: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::pgd(10)
    }
}

impl AttackConfig {
    /// ε = 8/255, α = 2/255, cross-entropy, random start.
    pub fn pgd(steps: usize) -> Self {
        AttackConfig { epsilon: 8.0 / 255.0, step_size: 2.0 / 255.0, steps, loss: LossKind::CrossEntropy, random_init: true }
    }

    /// PGD on the CW margin with the same radius and step.
    pub fn cw(steps: usize) -> Self {
        AttackConfig { loss: LossKind::CwMargin, ..AttackConfig::pgd(steps) }
    }

    /// No perturbation at all.
    pub fn none() -> Self {
        AttackConfig { epsilon: 0.0, step_size: 0.0, steps: 0, loss: LossKind::CrossEntropy, random_init: false }
    }

    /// `pgd<N>`, `cw<N>` or `none`.
    pub fn preset(name: &str) -> Option<Self> {
        if name == "none" {
            return Some(Self::none());
        }
        if let Some(n) = name.strip_prefix("pgd") {
            return n.parse().ok().map(Self::pgd);
        }
        if let Some(n) = name.strip_prefix("cw") {
            return n.parse().ok().map(Self::cw);
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::validation(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::validation(format!("step size {} must be finite and ≥ 0", self.step_size)));
        }
        Ok(())
    }
}

/// `max_{i≠y} z_i − z_y`. Ties for the runner-up resolve to the smallest
/// index.
pub fn cw_margin_loss<T: Real>(g: &mut Graph<T>, logits: Var, label: usize) -> Result<Var> {
    let z = g.value(logits).data();
    let classes = z.len();
    if classes < 2 {
        return Err(Error::contract("cw margin needs at least two classes"));
    }
    if label >= classes {
        return Err(Error::contract(format!("label {label} out of range for {classes} classes")));
    }
    let mut runner = usize::MAX;
    for (i, &v) in z.iter().enumerate() {
        if i != label && (runner == usize::MAX || v > z[runner]) {
            runner = i;
        }
    }
    let other = g.gather(logits, vec![runner], &[])?;
    let own = g.gather(logits, vec![label], &[])?;
    g.sub(other, own)
}

/// Clamp to the ε-ball, then to the image box `[0, 1]`. The box clamp is
/// written as `δ ∈ [−x, 1−x]` so interior pixels keep δ exactly.
pub fn project<T: Real>(delta: &Tensor<T>, x: &Tensor<T>, epsilon: T) -> Tensor<T> {
    let data = delta
        .data()
        .iter()
        .zip(x.data())
        .map(|(&d, &xv)| {
            let d = d.max(-epsilon).min(epsilon);
            d.max(-xv).min(T::one() - xv)
        })
        .collect();
    Tensor::from_parts(delta.shape().to_vec(), data)
}

/// Loss at `input` (for the hard label) and its gradient with respect to
/// the input. Gates act on the backward pass only.
pub fn input_gradient<T: Real, M: Classifier<T> + ?Sized>(
    model: &M,
    input: &Tensor<T>,
    label: usize,
    loss: LossKind,
    gates: Option<&GateVector>,
) -> Result<(T, Tensor<T>)> {
    let mut g = Graph::new();
    let x = g.param(input.clone());
    let logits = model.forward(&mut g, x, gates)?;
    let out = match loss {
        LossKind::CrossEntropy => {
            let c = model.num_classes();
            let row = g.reshape(logits, &[1, c])?;
            g.cross_entropy(row, &one_hot::<T>(label, c).reshaped(&[1, c])?)?
        }
        LossKind::CwMargin => cw_margin_loss(&mut g, logits, label)?,
    };
    g.backward(out)?;
    let grad = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
    Ok((g.value(out).item(), grad))
}

/// State of one PGD iteration, exposed to observers.
pub struct PgdStep<'a, T> {
    pub iteration: usize,
    pub mask: &'a PatchMask,
    /// Masked perturbation the gradient is taken at.
    pub masked_delta: &'a Tensor<T>,
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// PGD on a single example with per-iteration patch masking (fraction `k`)
/// and fixed attention gates. `k = 0` with open gates is plain PGD.
#[allow(clippy::too_many_arguments)]
pub fn pgd_single<T: Real, M: Classifier<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    label: usize,
    cfg: &AttackConfig,
    gates: Option<&GateVector>,
    mask_fraction: f64,
    rng: &mut RngState,
    mut observe: impl FnMut(&PgdStep<'_, T>),
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&mask_fraction) {
        return Err(Error::contract(format!("mask fraction {mask_fraction} outside [0, 1]")));
    }
    if let Some(g) = gates {
        if g.len() != model.depth() {
            return Err(Error::contract(format!(
                "gate vector has {} entries but the model has {} blocks",
                g.len(),
                model.depth()
            )));
        }
    }
    let eps = T::from_f64_lossy(cfg.epsilon);
    let alpha = T::from_f64_lossy(cfg.step_size);
    let mut delta = if cfg.random_init {
        let data = (0..x.numel())
            .map(|_| T::from_f64_lossy(rng.uniform(-cfg.epsilon, cfg.epsilon)))
            .collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    } else {
        Tensor::zeros(x.shape())
    };
    delta = project(&delta, x, eps);

    let grid = model.patch_grid();
    for iteration in 0..cfg.steps {
        let mask = sample_patch_mask(mask_fraction, grid.num_patches(), rng)?;
        let masked = if mask.masked_count() == 0 {
            delta
        } else {
            let pixel_mask = expand_mask::<T>(&mask, &grid)?;
            let data = delta.data().iter().zip(pixel_mask.data()).map(|(&d, &m)| d * m).collect();
            Tensor::from_parts(delta.shape().to_vec(), data)
        };
        observe(&PgdStep { iteration, mask: &mask, masked_delta: &masked });

        let input = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(masked.data()).map(|(&a, &b)| a + b).collect(),
        );
        let (_, grad) = input_gradient(model, &input, label, cfg.loss, gates)?;
        if !grad.is_finite() {
            return Err(Error::NonFinite { op: format!("attack gradient at iteration {iteration}") });
        }
        let stepped = Tensor::from_parts(
            x.shape().to_vec(),
            masked.data().iter().zip(grad.data()).map(|(&d, &g)| d + alpha * sign(g)).collect(),
        );
        delta = project(&stepped, x, eps);
    }
    Ok(delta)
}

/// PGD over a batch. Example `i` draws from its own stream
/// `RngState::with_stream(seed, i)`, so results do not depend on how the
/// batch is scheduled across threads.
pub fn pgd_attack<T: Real, M: Classifier<T> + ?Sized>(
    model: &M,
    images: &[Tensor<T>],
    labels: &[usize],
    cfg: &AttackConfig,
    gates: Option<&GateVector>,
    mask_fraction: f64,
    seed: u64,
) -> Result<Vec<Tensor<T>>> {
    if images.len() != labels.len() {
        return Err(Error::contract(format!("{} images but {} labels", images.len(), labels.len())));
    }
    images
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| {
            let mut rng = RngState::with_stream(seed, i as u64);
            pgd_single(model, x, y, cfg, gates, mask_fraction, &mut rng, |_| {})
        })
        .collect()
}

/// Index of the largest logit; ties go to the smallest index.
pub fn argmax<T: Real>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict<T: Real, M: Classifier<T> + ?Sized>(model: &M, image: &Tensor<T>) -> Result<usize> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let logits = model.forward(&mut g, x, None)?;
    Ok(argmax(g.value(logits).data()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub name: String,
    pub attack: AttackConfig,
    pub robust_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub clean_acc: f64,
    pub seed: u64,
    pub attacks: Vec<AttackOutcome>,
}

/// Clean accuracy plus accuracy under each attack. Evaluation always runs
/// with open gates and no masking.
pub fn robust_eval<T: Real, M: Classifier<T> + ?Sized>(
    model: &M,
    dataset: &Dataset,
    attacks: &[(String, AttackConfig)],
    seed: u64,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    let images: Vec<Tensor<T>> = (0..dataset.len()).map(|i| dataset.image(i)).collect();
    let labels = dataset.labels();
    let accuracy = |inputs: &[Tensor<T>]| -> Result<f64> {
        let correct = inputs
            .par_iter()
            .zip(labels.par_iter())
            .map(|(x, &y)| predict(model, x).map(|p| (p == y) as usize))
            .collect::<Result<Vec<_>>>()?;
        Ok(correct.iter().sum::<usize>() as f64 / inputs.len() as f64)
    };
    let clean_acc = accuracy(&images)?;
    let mut outcomes = Vec::with_capacity(attacks.len());
    for (k, (name, cfg)) in attacks.iter().enumerate() {
        let deltas = pgd_attack(model, &images, labels, cfg, None, 0.0, mix_seed(seed, &[k as u64]))?;
        let adv: Vec<Tensor<T>> = images
            .iter()
            .zip(&deltas)
            .map(|(x, d)| {
                Tensor::from_parts(x.shape().to_vec(), x.data().iter().zip(d.data()).map(|(&a, &b)| a + b).collect())
            })
            .collect();
        outcomes.push(AttackOutcome { name: name.clone(), attack: cfg.clone(), robust_acc: accuracy(&adv)? });
    }
    Ok(EvalReport { examples: dataset.len(), clean_acc, seed, attacks: outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cw_margin_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::from_f64(&[3], &[2.0, 0.5, 0.1]).unwrap());
        let m = cw_margin_loss(&mut g, z, 0).unwrap();
        assert!((g.value(m).item() + 1.5).abs() < 1e-15);
        g.backward(m).unwrap();
        assert_eq!(g.grad(z).unwrap().data(), &[-1.0, 1.0, 0.0]);

        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64(&[2], &[0.1, 3.0]).unwrap());
        let m = cw_margin_loss(&mut g, z, 0).unwrap();
        assert!((g.value(m).item() - 2.9).abs() < 1e-15);
    }

    #[test]
    fn cw_margin_tie_picks_smallest_index() {
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::from_f64(&[4], &[0.0, 1.0, 2.0, 2.0]).unwrap());
        let m = cw_margin_loss(&mut g, z, 0).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(z).unwrap().data(), &[-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn cw_margin_needs_two_classes() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64(&[1], &[1.0]).unwrap());
        assert!(matches!(cw_margin_loss(&mut g, z, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn project_examples() {
        let eps = 0.03;
        let x = Tensor::<f64>::full(&[4], 0.5);
        let d = Tensor::full(&[4], 10.0 * eps);
        assert_eq!(project(&d, &x, eps).data(), &[eps; 4]);

        let x = Tensor::<f64>::full(&[2], 1.0);
        let d = Tensor::full(&[2], eps);
        assert_eq!(project(&d, &x, eps).data(), &[0.0, 0.0]);
    }

    #[test]
    fn presets() {
        assert_eq!(AttackConfig::preset("pgd20").unwrap().steps, 20);
        assert_eq!(AttackConfig::preset("cw20").unwrap().loss, LossKind::CwMargin);
        assert_eq!(AttackConfig::preset("none").unwrap().steps, 0);
        assert!(AttackConfig::preset("fgsm").is_none());
        let p = AttackConfig::preset("pgd100").unwrap();
        assert_eq!(p.step_size, 2.0 / 255.0);
        assert_eq!(p.epsilon, 8.0 / 255.0);
    }
}
