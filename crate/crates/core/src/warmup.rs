//! Warm-up scheduling for attention gradient dropping and perturbation
//! masking.
//!
//! Both mechanisms weaken the attack early in training and fade out
//! linearly over the first `n_w` epochs, interpolated per batch:
//! `p = 1 − min(t/n_w + (a+1)/(R·n_w), 1)` at epoch `t`, batch `a`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::vit::{GateVector, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarmupMode {
    /// Gates and masks share one schedule (`k = p`).
    Combined,
    /// Gates only; `k = 0`.
    ArdOnly,
    /// Masks only; `p = 0`.
    PrmOnly,
    #[default]
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupSchedule {
    pub warmup_epochs: usize,
    pub batches_per_epoch: usize,
    pub mode: WarmupMode,
}

/// Drop probability `p` and mask fraction `k` for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupLevels {
    pub drop_prob: f64,
    pub mask_fraction: f64,
}

impl WarmupSchedule {
    pub fn new(warmup_epochs: usize, batches_per_epoch: usize, mode: WarmupMode) -> Result<Self> {
        if batches_per_epoch == 0 {
            return Err(Error::validation("batches per epoch must be positive"));
        }
        Ok(WarmupSchedule { warmup_epochs, batches_per_epoch, mode })
    }

    pub fn off(batches_per_epoch: usize) -> Self {
        WarmupSchedule { warmup_epochs: 0, batches_per_epoch: batches_per_epoch.max(1), mode: WarmupMode::Off }
    }

    /// The shared linear decay, ignoring the mode.
    pub fn decay(&self, epoch: usize, batch: usize) -> Result<f64> {
        if batch >= self.batches_per_epoch {
            return Err(Error::contract(format!(
                "batch index {batch} out of range for {} batches per epoch",
                self.batches_per_epoch
            )));
        }
        if self.warmup_epochs == 0 || self.mode == WarmupMode::Off {
            return Ok(0.0);
        }
        let nw = self.warmup_epochs as f64;
        let r = self.batches_per_epoch as f64;
        let progress = epoch as f64 / nw + (batch + 1) as f64 / (r * nw);
        Ok(1.0 - progress.min(1.0))
    }

    pub fn levels(&self, epoch: usize, batch: usize) -> Result<WarmupLevels> {
        let v = self.decay(epoch, batch)?;
        let (drop_prob, mask_fraction) = match self.mode {
            WarmupMode::Combined => (v, v),
            WarmupMode::ArdOnly => (v, 0.0),
            WarmupMode::PrmOnly => (0.0, v),
            WarmupMode::Off => (0.0, 0.0),
        };
        Ok(WarmupLevels { drop_prob, mask_fraction })
    }

    /// Attention drop probability `p`.
    pub fn drop_prob(&self, epoch: usize, batch: usize) -> Result<f64> {
        Ok(self.levels(epoch, batch)?.drop_prob)
    }

    /// Perturbation mask fraction `k`.
    pub fn mask_fraction(&self, epoch: usize, batch: usize) -> Result<f64> {
        Ok(self.levels(epoch, batch)?.mask_fraction)
    }
}

/// One gate per block, each closed with probability `p`.
pub fn sample_gates(p: f64, depth: usize, rng: &mut RngState) -> GateVector {
    GateVector::new((0..depth).map(|_| !rng.bernoulli(p)).collect())
}

/// Which patches have their perturbation removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    masked: Vec<bool>,
}

impl PatchMask {
    pub fn none(patches: usize) -> Self {
        PatchMask { masked: vec![false; patches] }
    }

    pub fn from_masked(masked: Vec<bool>) -> Self {
        PatchMask { masked }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked[patch]
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.masked
    }
}

/// `⌊J·k⌋`, evaluated in 64-bit.
pub fn masked_patch_count(patches: usize, fraction: f64) -> usize {
    ((patches as f64 * fraction).floor() as usize).min(patches)
}

/// Masks exactly `⌊J·k⌋` patches chosen uniformly without replacement.
pub fn sample_patch_mask(k: f64, patches: usize, rng: &mut RngState) -> Result<PatchMask> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::contract(format!("mask fraction {k} outside [0, 1]")));
    }
    let mut masked = vec![false; patches];
    for i in rng.choose_distinct(patches, masked_patch_count(patches, k)) {
        masked[i] = true;
    }
    Ok(PatchMask { masked })
}

/// Image geometry needed to map patches to pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.side() * self.side()
    }
}

impl From<&ViTConfig> for PatchGrid {
    fn from(c: &ViTConfig) -> Self {
        PatchGrid { channels: c.channels, image_size: c.image_size, patch_size: c.patch_size }
    }
}

/// Pixel mask `[C, H, W]`: 0 on masked patches, 1 elsewhere. Patch order
/// matches the model's patch embedding.
pub fn expand_mask<T: Real>(mask: &PatchMask, grid: &PatchGrid) -> Result<Tensor<T>> {
    if mask.len() != grid.num_patches() {
        return Err(Error::contract(format!(
            "mask covers {} patches but the image has {}",
            mask.len(),
            grid.num_patches()
        )));
    }
    let (c, s, p, side) = (grid.channels, grid.image_size, grid.patch_size, grid.side());
    let mut out = Tensor::ones(&[c, s, s]);
    let data = out.data_mut();
    for (j, _) in mask.as_slice().iter().enumerate().filter(|(_, &m)| m) {
        let (gr, gc) = (j / side, j % side);
        for ch in 0..c {
            for y in gr * p..(gr + 1) * p {
                let row = ch * s * s + y * s;
                data[row + gc * p..row + (gc + 1) * p].fill(T::zero());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn combined(nw: usize, r: usize) -> WarmupSchedule {
        WarmupSchedule::new(nw, r, WarmupMode::Combined).unwrap()
    }

    #[test]
    fn drop_prob_examples() {
        let s = combined(10, 100);
        assert!((s.drop_prob(0, 0).unwrap() - 0.999).abs() < 1e-12);
        assert!((s.drop_prob(0, 99).unwrap() - 0.9).abs() < 1e-12);
        for a in 0..100 {
            assert_eq!(s.drop_prob(10, a).unwrap(), 0.0);
            assert_eq!(s.drop_prob(25, a).unwrap(), 0.0);
        }
    }

    #[test]
    fn drop_prob_rejects_batch_out_of_range() {
        assert!(matches!(combined(10, 100).drop_prob(0, 100), Err(Error::Contract(_))));
    }

    #[test]
    fn disabled_schedules_are_zero() {
        let off = WarmupSchedule::new(10, 5, WarmupMode::Off).unwrap();
        let zero = combined(0, 5);
        for t in 0..3 {
            for a in 0..5 {
                assert_eq!(off.levels(t, a).unwrap(), WarmupLevels { drop_prob: 0.0, mask_fraction: 0.0 });
                assert_eq!(zero.levels(t, a).unwrap(), WarmupLevels { drop_prob: 0.0, mask_fraction: 0.0 });
            }
        }
    }

    #[test]
    fn modes_split_levels() {
        let ard = WarmupSchedule::new(4, 2, WarmupMode::ArdOnly).unwrap();
        let prm = WarmupSchedule::new(4, 2, WarmupMode::PrmOnly).unwrap();
        let both = combined(4, 2);
        let l = both.levels(1, 0).unwrap();
        assert_eq!(l.drop_prob, l.mask_fraction);
        assert_eq!(ard.levels(1, 0).unwrap().mask_fraction, 0.0);
        assert_eq!(ard.levels(1, 0).unwrap().drop_prob, l.drop_prob);
        assert_eq!(prm.levels(1, 0).unwrap().drop_prob, 0.0);
        assert_eq!(prm.levels(1, 0).unwrap().mask_fraction, l.mask_fraction);
    }

    #[test]
    fn gates_at_extremes() {
        let mut rng = RngState::new(3);
        assert!(sample_gates(0.0, 12, &mut rng).all_open());
        assert!(sample_gates(1.0, 12, &mut rng).as_slice().iter().all(|&g| !g));
    }

    #[test]
    fn gate_mean_monte_carlo() {
        // mean of 120 000 Bernoulli(0.7) draws: 3σ ≈ 0.004, well inside ±0.01
        let mut rng = RngState::new(5);
        let mut open = 0usize;
        for _ in 0..10_000 {
            open += sample_gates(0.3, 12, &mut rng).as_slice().iter().filter(|&&g| g).count();
        }
        let mean = open as f64 / 120_000.0;
        assert!((0.69..=0.71).contains(&mean), "mean {mean}");
    }

    #[test]
    fn mask_counts() {
        let mut rng = RngState::new(9);
        assert_eq!(sample_patch_mask(0.0, 16, &mut rng).unwrap().masked_count(), 0);
        assert_eq!(sample_patch_mask(1.0, 16, &mut rng).unwrap().masked_count(), 16);
        assert_eq!(sample_patch_mask(0.5, 16, &mut rng).unwrap().masked_count(), 8);
        assert!(sample_patch_mask(1.5, 16, &mut rng).is_err());
    }

    #[test]
    fn mask_uniformity_monte_carlo() {
        // per-patch frequency 0.5, σ = 0.005 over 10 000 draws
        let mut rng = RngState::new(17);
        let mut hits = [0usize; 16];
        for _ in 0..10_000 {
            let m = sample_patch_mask(0.5, 16, &mut rng).unwrap();
            assert_eq!(m.masked_count(), 8);
            for (j, h) in hits.iter_mut().enumerate() {
                *h += m.is_masked(j) as usize;
            }
        }
        for h in hits {
            let f = h as f64 / 10_000.0;
            assert!((0.485..=0.515).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn expand_first_patch() {
        let grid = PatchGrid { channels: 3, image_size: 16, patch_size: 4 };
        let mut masked = vec![false; 16];
        masked[0] = true;
        let m: Tensor<f64> = expand_mask(&PatchMask::from_masked(masked), &grid).unwrap();
        for ch in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let v = m.data()[ch * 256 + y * 16 + x];
                    let expect = if y < 4 && x < 4 { 0.0 } else { 1.0 };
                    assert_eq!(v, expect, "ch {ch} y {y} x {x}");
                }
            }
        }
    }

    #[test]
    fn expand_all_and_none() {
        let grid = PatchGrid { channels: 2, image_size: 8, patch_size: 2 };
        let all: Tensor<f32> = expand_mask(&PatchMask::from_masked(vec![true; 16]), &grid).unwrap();
        assert!(all.data().iter().all(|&v| v == 0.0));
        let none: Tensor<f32> = expand_mask(&PatchMask::none(16), &grid).unwrap();
        assert!(none.data().iter().all(|&v| v == 1.0));
        assert!(expand_mask::<f32>(&PatchMask::none(15), &grid).is_err());
    }
}
