//! Batch-level Mixup and CutMix on images `[C, H, W]` and soft labels `[K]`.

use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngState;
use crate::tensor::Tensor;

fn sample_lambda(alpha: f64, rng: &mut RngState) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::validation(format!("beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng))
}

fn random_partner(n: usize, rng: &mut RngState) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    perm
}

fn blend<T: Real>(a: &Tensor<T>, b: &Tensor<T>, w: f64) -> Tensor<T> {
    let (wa, wb) = (T::from_f64_lossy(w), T::from_f64_lossy(1.0 - w));
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| wa * x + wb * y).collect(),
    )
}

/// Mixup with `λ ~ Beta(α, α)` and a random partner permutation. Batches
/// of fewer than two examples pass through. Returns the λ used.
pub fn mixup<T: Real>(images: &mut [Tensor<T>], labels: &mut [Tensor<T>], alpha: f64, rng: &mut RngState) -> Result<Option<f64>> {
    if images.len() < 2 {
        return Ok(None);
    }
    let lambda = sample_lambda(alpha, rng)?;
    let partner = random_partner(images.len(), rng);
    mixup_with(images, labels, lambda, &partner);
    Ok(Some(lambda))
}

/// `x̃ᵢ = λ·xᵢ + (1−λ)·x_partner(i)`, likewise for labels.
pub fn mixup_with<T: Real>(images: &mut [Tensor<T>], labels: &mut [Tensor<T>], lambda: f64, partner: &[usize]) {
    let (xs, ys) = (images.to_vec(), labels.to_vec());
    for (i, &j) in partner.iter().enumerate() {
        images[i] = blend(&xs[i], &xs[j], lambda);
        labels[i] = blend(&ys[i], &ys[j], lambda);
    }
}

/// Pasted rectangle, half-open in both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// Side lengths of the unclipped region: `⌊H·√(1−λ)⌋ × ⌊W·√(1−λ)⌋`.
pub fn cut_size(lambda: f64, height: usize, width: usize) -> (usize, usize) {
    let r = (1.0 - lambda).max(0.0).sqrt();
    ((height as f64 * r).floor() as usize, (width as f64 * r).floor() as usize)
}

/// Box of the given size centred at `(cy, cx)`, clipped to the image.
pub fn cut_box(center: (usize, usize), size: (usize, usize), height: usize, width: usize) -> CutBox {
    let clip = |c: usize, len: usize, limit: usize| {
        let lo = c as isize - (len / 2) as isize;
        let hi = lo + len as isize;
        (lo.clamp(0, limit as isize) as usize, hi.clamp(0, limit as isize) as usize)
    };
    let (y0, y1) = clip(center.0, size.0, height);
    let (x0, x1) = clip(center.1, size.1, width);
    CutBox { y0, y1, x0, x1 }
}

/// CutMix with `λ ~ Beta(α, α)`, a uniformly placed centre and a random
/// partner permutation. Returns the realized label weight of the original
/// image, or `None` on pass-through.
pub fn cutmix<T: Real>(images: &mut [Tensor<T>], labels: &mut [Tensor<T>], alpha: f64, rng: &mut RngState) -> Result<Option<f64>> {
    if images.len() < 2 {
        return Ok(None);
    }
    let lambda = sample_lambda(alpha, rng)?;
    let partner = random_partner(images.len(), rng);
    let s = images[0].shape();
    let (h, w) = (s[1], s[2]);
    let center = (rng.below(h), rng.below(w));
    let region = cut_box(center, cut_size(lambda, h, w), h, w);
    Ok(Some(cutmix_with(images, labels, region, &partner)))
}

/// Pastes `region` from each partner and weights labels by the realized
/// area: `λ' = 1 − area / (H·W)`.
pub fn cutmix_with<T: Real>(images: &mut [Tensor<T>], labels: &mut [Tensor<T>], region: CutBox, partner: &[usize]) -> f64 {
    let xs = images.to_vec();
    let ys = labels.to_vec();
    let s = xs[0].shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let weight = 1.0 - region.area() as f64 / (h * w) as f64;
    for (i, &j) in partner.iter().enumerate() {
        let dst = images[i].data_mut();
        let src = xs[j].data();
        for ch in 0..c {
            for y in region.y0..region.y1 {
                let row = ch * h * w + y * w;
                dst[row + region.x0..row + region.x1].copy_from_slice(&src[row + region.x0..row + region.x1]);
            }
        }
        labels[i] = blend(&ys[i], &ys[j], weight);
    }
    weight
}
