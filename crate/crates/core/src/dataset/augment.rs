//! Feature-wise normalization and paired random shifts.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::error::{Error, Result};
use crate::fsio;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Factor applied to raw 8-bit pixel values at ingest.
    pub rescale: f32,
    /// Maximum horizontal shift as a fraction of the width.
    pub width_shift_range: f64,
    /// Maximum vertical shift as a fraction of the height.
    pub height_shift_range: f64,
    pub featurewise_center: bool,
    pub featurewise_std_normalization: bool,
    /// Shifted copies added per training original.
    pub copies: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rescale: 1.0 / 255.0,
            width_shift_range: 0.1,
            height_shift_range: 0.1,
            featurewise_center: true,
            featurewise_std_normalization: true,
            copies: 1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No normalization and no shifts.
    pub fn identity() -> Self {
        AugmentConfig {
            width_shift_range: 0.0,
            height_shift_range: 0.0,
            featurewise_center: false,
            featurewise_std_normalization: false,
            copies: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("width_shift_range", self.width_shift_range),
            ("height_shift_range", self.height_shift_range),
        ] {
            if !(0.0..=0.5).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 0.5]")));
            }
        }
        if !(self.rescale.is_finite() && self.rescale > 0.0) {
            return Err(Error::Config(format!("rescale must be positive, got {}", self.rescale)));
        }
        Ok(())
    }

    pub fn needs_stats(&self) -> bool {
        self.featurewise_center || self.featurewise_std_normalization
    }
}

/// Per-channel mean and population standard deviation of a sample set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Added to the standard deviation before dividing.
const STD_EPSILON: f64 = 1e-6;

impl DatasetStats {
    pub fn compute(samples: &[ImageSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("dataset statistics need at least one sample".into()))?;
        let c = *first.image.shape().last().unwrap();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for s in samples {
            if s.image.shape().last() != Some(&c) {
                return Err(Error::shape("dataset statistics", first.image.shape(), s.image.shape()));
            }
            for px in s.image.data().chunks_exact(c) {
                for (k, &v) in px.iter().enumerate() {
                    sum[k] += v as f64;
                }
            }
            count += s.image.len() / c;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for s in samples {
            for px in s.image.data().chunks_exact(c) {
                for (k, &v) in px.iter().enumerate() {
                    let d = v as f64 - mean[k];
                    sq[k] += d * d;
                }
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        Ok(DatasetStats { mean, std })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Applies the feature-wise flags of `config` to the image. The mask is
/// never touched.
pub fn normalize(sample: &ImageSample, config: &AugmentConfig, stats: Option<&DatasetStats>) -> Result<ImageSample> {
    if !config.needs_stats() {
        return Ok(sample.clone());
    }
    let stats = stats.ok_or(Error::MissingStats)?;
    let c = *sample.image.shape().last().unwrap();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::shape("normalize", &[stats.mean.len()], &[c]));
    }
    let mut image = sample.image.clone();
    for px in image.data_mut().chunks_exact_mut(c) {
        for (k, v) in px.iter_mut().enumerate() {
            let mut x = *v as f64;
            if config.featurewise_center {
                x -= stats.mean[k];
            }
            if config.featurewise_std_normalization {
                x /= stats.std[k] + STD_EPSILON;
            }
            *v = x as f32;
        }
    }
    Ok(ImageSample {
        id: sample.id.clone(),
        image,
        mask: sample.mask.clone(),
    })
}

fn shift_tensor(t: &Tensor<f32>, dy: i64, dx: i64) -> Tensor<f32> {
    let (h, w, c) = (t.shape()[0] as i64, t.shape()[1] as i64, t.shape()[2]);
    let src = t.data();
    let mut out = Tensor::zeros(t.shape().to_vec());
    let dst = out.data_mut();
    for i in 0..h {
        let si = i - dy;
        if !(0..h).contains(&si) {
            continue;
        }
        for j in 0..w {
            let sj = j - dx;
            if !(0..w).contains(&sj) {
                continue;
            }
            let to = ((i * w + j) as usize) * c;
            let from = ((si * w + sj) as usize) * c;
            dst[to..to + c].copy_from_slice(&src[from..from + c]);
        }
    }
    out
}

/// Moves image and mask content down by `dy` and right by `dx` pixels,
/// filling uncovered pixels with 0.
pub fn shift(sample: &ImageSample, dy: i64, dx: i64) -> ImageSample {
    ImageSample {
        id: sample.id.clone(),
        image: shift_tensor(&sample.image, dy, dx),
        mask: shift_tensor(&sample.mask, dy, dx),
    }
}

/// Normalizes, then shifts image and mask together by offsets drawn
/// uniformly from `±⌊range · extent⌋`.
pub fn augment<R: Rng + ?Sized>(
    sample: &ImageSample,
    config: &AugmentConfig,
    stats: Option<&DatasetStats>,
    rng: &mut R,
) -> Result<ImageSample> {
    config.validate()?;
    let normalized = normalize(sample, config, stats)?;
    let (h, w) = sample.size();
    let max_dy = (config.height_shift_range * h as f64).floor() as i64;
    let max_dx = (config.width_shift_range * w as f64).floor() as i64;
    let dy = rng.random_range(-max_dy..=max_dy);
    let dx = rng.random_range(-max_dx..=max_dx);
    if dy == 0 && dx == 0 {
        return Ok(normalized);
    }
    Ok(shift(&normalized, dy, dx))
}

/// Normalized originals, each followed by `config.copies` augmented copies.
/// Copy `k` of sample `i` draws from its own stream, so the result does not
/// depend on evaluation order.
pub fn build_training_set(
    samples: &[ImageSample],
    config: &AugmentConfig,
    stats: Option<&DatasetStats>,
) -> Result<Vec<ImageSample>> {
    config.validate()?;
    let mut out = Vec::with_capacity(samples.len() * (1 + config.copies));
    for (i, s) in samples.iter().enumerate() {
        out.push(normalize(s, config, stats)?);
        for k in 0..config.copies {
            let mut r = rng::stream_at(config.seed, &[0xA06, i as u64, k as u64]);
            let mut a = augment(s, config, stats, &mut r)?;
            a.id = format!("{}#aug{k}", s.id);
            out.push(a);
        }
    }
    Ok(out)
}
