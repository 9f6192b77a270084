//! Datasets: in-memory representation, the `AVD1` container, a seeded
//! synthetic generator and crop/flip augmentation.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "AVD1" | u32 count | u32 channels | u32 H | u32 W | u32 C
//!        | count × u8 label | count × channels × H × W × u8 pixel
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"AVD1";
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Images `count × channels × H × W` with values in `[0, 1]`, one class
/// label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<f32>,
    labels: Vec<usize>,
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        pixels: Vec<f32>,
        labels: Vec<usize>,
        [channels, height, width]: [usize; 3],
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = channels * height * width;
        if labels.is_empty() || per == 0 {
            return Err(Error::validation("dataset must hold at least one non-empty image"));
        }
        if pixels.len() != labels.len() * per {
            return Err(Error::validation(format!(
                "{} labels need {} pixels, got {}",
                labels.len(),
                labels.len() * per,
                pixels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::validation(format!("label {bad} out of range for {classes} classes")));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("pixel values must lie in [0, 1]"));
        }
        Ok(Dataset { pixels, labels, channels, height, width, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image<T: Real>(&self, i: usize) -> Tensor<T> {
        let data = self.pixels(i).iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        Tensor::from_parts(self.image_shape().to_vec(), data)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// First `n` examples.
    pub fn truncated(mut self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::validation("cannot truncate a dataset to zero examples"));
        }
        let n = n.min(self.len());
        self.pixels.truncate(n * self.image_len());
        self.labels.truncate(n);
        Ok(self)
    }
}

/// One-hot row `[C]`.
pub fn one_hot<T: Real>(label: usize, classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[classes]);
    t.data_mut()[label] = T::one();
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
    /// Keep only the first `total` examples.
    #[serde(default)]
    pub total: Option<usize>,
    #[serde(default)]
    pub split: Split,
}

const NOISE_STD: f64 = 0.05;
const BACKGROUND: f64 = 0.1;

/// Class tint: a hue wheel sampled at `c / C`, one phase offset per channel.
fn class_color(class: usize, classes: usize, channel: usize, channels: usize) -> f64 {
    let phase = class as f64 / classes as f64 + channel as f64 / channels.max(1) as f64;
    0.55 + 0.4 * (2.0 * PI * phase).cos()
}

/// Binary pattern for one example of `class`, jittered by `rng`.
/// Families cycle filled rectangle, stripes, checkerboard; stripes and
/// checkers alternate orientation and scale every three classes.
fn class_pattern(class: usize, size: usize, rng: &mut RngState) -> Vec<bool> {
    let variant = class / 3;
    let mut pattern = vec![false; size * size];
    match class % 3 {
        0 => {
            let side = (size / 2).max(1) + variant % 2;
            let side = side.min(size);
            let ox = rng.below(size - side + 1);
            let oy = rng.below(size - side + 1);
            for y in oy..oy + side {
                for x in ox..ox + side {
                    pattern[y * size + x] = true;
                }
            }
        }
        1 => {
            let period = 4 + 2 * (variant / 2);
            let phase = rng.below(period);
            let vertical = variant % 2 == 1;
            for y in 0..size {
                for x in 0..size {
                    let coord = if vertical { x } else { y };
                    pattern[y * size + x] = (coord + phase) % period < period / 2;
                }
            }
        }
        _ => {
            let cell = ((size / 8).max(1)) * (1 + variant % 2);
            let (px, py) = (rng.below(2 * cell), rng.below(2 * cell));
            for y in 0..size {
                for x in 0..size {
                    pattern[y * size + x] = ((x + px) / cell + (y + py) / cell) % 2 == 0;
                }
            }
        }
    }
    pattern
}

/// Seeded synthetic set. Example `i` has label `i mod C`; each image is a
/// tinted class pattern plus Gaussian pixel noise (σ = 0.05), clamped to
/// `[0, 1]`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::validation("synthetic data needs at least 2 classes"));
    }
    if spec.per_class == 0 || spec.image_size == 0 || spec.channels == 0 {
        return Err(Error::validation("per_class, image_size and channels must be positive"));
    }
    let (c, s, ch) = (spec.classes, spec.image_size, spec.channels);
    let count = c * spec.per_class;
    let mut rng = RngState::new(spec.seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut pixels = Vec::with_capacity(count * ch * s * s);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % c;
        let pattern = class_pattern(class, s, &mut rng);
        for channel in 0..ch {
            let color = class_color(class, c, channel, ch);
            for &on in &pattern {
                let base = if on { color } else { BACKGROUND };
                let v = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                pixels.push(v as f32);
            }
        }
        labels.push(class);
    }
    let ds = Dataset::new(pixels, labels, [ch, s, s], c, spec.split)?;
    match spec.total {
        Some(n) => ds.truncated(n),
        None => Ok(ds),
    }
}

/// Serializes to the `AVD1` container, quantizing pixels to 8 bits.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.classes > 256 {
        return Err(Error::validation("AVD1 stores labels as u8; at most 256 classes"));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * (1 + ds.image_len()));
    out.extend_from_slice(DATASET_MAGIC);
    for v in [ds.len(), ds.channels, ds.height, ds.width, ds.classes] {
        let v = u32::try_from(v).map_err(|_| Error::validation("dataset dimension exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(ds.labels.iter().map(|&l| l as u8));
    out.extend(ds.pixels.iter().map(|&v| (v as f64 * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

/// Sidecar holding the CRC-32 of a container as eight hex digits. The
/// container itself has no room for a checksum, so corruption of pixel bytes
/// is only detectable through this file.
pub fn checksum_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".crc32");
    PathBuf::from(name)
}

/// Writes the container and its checksum sidecar.
pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(ds)?;
    fs::write(path, &bytes)?;
    fs::write(checksum_path(path), format!("{:08x}\n", crc32fast::hash(&bytes)))?;
    Ok(())
}

/// Reads a container, verifying the checksum sidecar when one exists.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let ds = decode_dataset(&bytes, path, Split::Train)?;
    let sidecar = checksum_path(path);
    if sidecar.exists() {
        let text = fs::read_to_string(&sidecar)?;
        let stored = u32::from_str_radix(text.trim(), 16).map_err(|_| Error::Malformed {
            path: sidecar.clone(),
            offset: 0,
            what: "checksum is not eight hex digits".into(),
        })?;
        let computed = crc32fast::hash(&bytes);
        if stored != computed {
            return Err(Error::Checksum { path: path.into(), stored, computed });
        }
    }
    Ok(ds)
}

/// Parses an `AVD1` image. `path` is only used in error messages.
pub fn decode_dataset(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::BadMagic { path: path.into(), offset: 0, expected: "AVD1" });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            offset: bytes.len() as u64,
            what: format!("header needs {HEADER_LEN} bytes"),
        });
    }
    let field = |i: usize| {
        let o = 4 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
    };
    let (count, channels, height, width, classes) = (field(0), field(1), field(2), field(3), field(4));
    for (i, (name, v)) in [("count", count), ("channels", channels), ("height", height), ("width", width), ("classes", classes)]
        .into_iter()
        .enumerate()
    {
        if v == 0 {
            return Err(Error::Malformed {
                path: path.into(),
                offset: (4 + 4 * i) as u64,
                what: format!("{name} must be positive"),
            });
        }
    }
    let per = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::Malformed { path: path.into(), offset: 8, what: "image size overflows".into() })?;
    let labels_end = HEADER_LEN + count;
    if bytes.len() < labels_end {
        return Err(Error::Truncated {
            path: path.into(),
            offset: bytes.len() as u64,
            what: format!("{count} labels declared"),
        });
    }
    let pixel_bytes = count
        .checked_mul(per)
        .ok_or_else(|| Error::Malformed { path: path.into(), offset: 4, what: "payload size overflows".into() })?;
    let end = labels_end + pixel_bytes;
    if bytes.len() < end {
        return Err(Error::Truncated {
            path: path.into(),
            offset: bytes.len() as u64,
            what: format!("{count} images of {per} bytes declared"),
        });
    }
    if bytes.len() > end {
        return Err(Error::Malformed {
            path: path.into(),
            offset: end as u64,
            what: format!("{} trailing bytes", bytes.len() - end),
        });
    }
    let mut labels = Vec::with_capacity(count);
    for (i, &l) in bytes[HEADER_LEN..labels_end].iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::LabelOutOfRange {
                path: path.into(),
                offset: (HEADER_LEN + i) as u64,
                label: l,
                classes: classes as u32,
            });
        }
        labels.push(l as usize);
    }
    let pixels = bytes[labels_end..end].iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(pixels, labels, [channels, height, width], classes, split)
}

/// Zero-pads by `pad`, crops the original size at offset `(dy, dx)` in the
/// padded frame and optionally mirrors horizontally.
pub fn crop_and_flip<T: Real>(image: &Tensor<T>, pad: usize, dy: usize, dx: usize, flip: bool) -> Tensor<T> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = Tensor::zeros(s);
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let tx = if flip { w - 1 - x } else { x };
                dst[ch * h * w + y * w + tx] = src[ch * h * w + sy as usize * w + sx as usize];
            }
        }
    }
    out
}

/// Random crop with zero padding, then a horizontal flip with probability
/// 0.5 when `flip_enabled`.
pub fn augment_basic<T: Real>(image: &Tensor<T>, pad: usize, flip_enabled: bool, rng: &mut RngState) -> Tensor<T> {
    let dy = rng.below(2 * pad + 1);
    let dx = rng.below(2 * pad + 1);
    let flip = flip_enabled && rng.bernoulli(0.5);
    crop_and_flip(image, pad, dy, dx, flip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize, per_class: usize) -> SyntheticSpec {
        SyntheticSpec { classes, per_class, image_size: 16, channels: 3, seed: 4, total: None, split: Split::Train }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = encode_dataset(&generate_synthetic(&spec(3, 10)).unwrap()).unwrap();
        let b = encode_dataset(&generate_synthetic(&spec(3, 10)).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_counts() {
        let ds = generate_synthetic(&spec(3, 10)).unwrap();
        assert_eq!(ds.len(), 30);
        for c in 0..3 {
            assert_eq!(ds.labels().iter().filter(|&&l| l == c).count(), 10);
        }
        assert!(ds.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn synthetic_rejects_one_class() {
        assert!(generate_synthetic(&spec(1, 10)).is_err());
    }

    #[test]
    fn total_truncates() {
        let mut s = spec(3, 171);
        s.total = Some(512);
        assert_eq!(generate_synthetic(&s).unwrap().len(), 512);
    }

    #[test]
    fn empty_file_is_bad_magic() {
        let err = decode_dataset(&[], Path::new("x"), Split::Train).unwrap_err();
        assert!(matches!(err, Error::BadMagic { offset: 0, .. }));
    }

    #[test]
    fn missing_image_is_truncation() {
        let ds = generate_synthetic(&spec(2, 5)).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        let cut = bytes.len() - 3 * 16 * 16;
        let err = decode_dataset(&bytes[..cut], Path::new("x"), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn label_out_of_range_names_offset() {
        let ds = generate_synthetic(&spec(2, 5)).unwrap();
        let mut bytes = encode_dataset(&ds).unwrap();
        bytes[HEADER_LEN + 3] = 7;
        match decode_dataset(&bytes, Path::new("x"), Split::Train).unwrap_err() {
            Error::LabelOutOfRange { offset, label, .. } => {
                assert_eq!(offset, 27);
                assert_eq!(label, 7);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn roundtrip_within_quantization() {
        let ds = generate_synthetic(&spec(3, 4)).unwrap();
        let back = decode_dataset(&encode_dataset(&ds).unwrap(), Path::new("x"), Split::Train).unwrap();
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in ds.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() as f64 <= 1.0 / 510.0 + 1e-7);
        }
    }

    #[test]
    fn augment_identity_without_pad_or_flip() {
        let ds = generate_synthetic(&spec(2, 1)).unwrap();
        let img: Tensor<f32> = ds.image(0);
        let mut rng = RngState::new(0);
        assert_eq!(augment_basic(&img, 0, false, &mut rng), img);
    }

    #[test]
    fn flip_is_involution() {
        let ds = generate_synthetic(&spec(2, 1)).unwrap();
        let img: Tensor<f64> = ds.image(1);
        let twice = crop_and_flip(&crop_and_flip(&img, 0, 0, 0, true), 0, 0, 0, true);
        assert_eq!(twice, img);
        assert_ne!(crop_and_flip(&img, 0, 0, 0, true), img);
    }

    #[test]
    fn crop_pixels_come_from_padded_image() {
        let ds = generate_synthetic(&spec(3, 2)).unwrap();
        let img: Tensor<f64> = ds.image(2);
        let mut rng = RngState::new(8);
        for _ in 0..20 {
            let out = augment_basic(&img, 4, true, &mut rng);
            let mut padded: Vec<u64> = img.data().iter().map(|v| v.to_bits()).collect();
            padded.extend(std::iter::repeat(0f64.to_bits()).take(3 * (24 * 24 - 16 * 16)));
            padded.sort_unstable();
            let mut crop: Vec<u64> = out.data().iter().map(|v| v.to_bits()).collect();
            crop.sort_unstable();
            // multiset containment by merge
            let mut i = 0;
            for v in crop {
                while i < padded.len() && padded[i] < v {
                    i += 1;
                }
                assert!(i < padded.len() && padded[i] == v);
                i += 1;
            }
        }
    }
}
