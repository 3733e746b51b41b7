//! Combining client updates: plain averaging, Gaussian-mechanism DP
//! averaging with a fixed clip, and DP averaging with a clip that adapts
//! geometrically toward a target quantile of update norms.
//!
//! Sums run in `f64` over clients in ascending `client_id` order, so the
//! result does not depend on the order updates arrive in.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::ClientUpdate;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorSpec {
    Mean {
        /// Weight each update by its example count.
        #[serde(default)]
        weighted: bool,
    },
    Dp {
        #[serde(default = "default_clip")]
        clip_norm: f64,
        #[serde(default = "default_noise")]
        noise_multiplier: f64,
        #[serde(default)]
        seed: u64,
    },
    AdaptiveQuantile {
        #[serde(default = "default_initial_clip")]
        initial_clip: f64,
        #[serde(default = "default_quantile")]
        target_quantile: f64,
        #[serde(default = "default_clip_lr")]
        learning_rate: f64,
        #[serde(default = "default_noise")]
        noise_multiplier: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_clip() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.5
}
fn default_initial_clip() -> f64 {
    0.1
}
fn default_quantile() -> f64 {
    0.5
}
fn default_clip_lr() -> f64 {
    0.2
}

impl Default for AggregatorSpec {
    fn default() -> Self {
        AggregatorSpec::Mean { weighted: false }
    }
}

impl AggregatorSpec {
    pub fn dp() -> Self {
        AggregatorSpec::Dp {
            clip_norm: default_clip(),
            noise_multiplier: default_noise(),
            seed: 0,
        }
    }

    pub fn adaptive() -> Self {
        AggregatorSpec::AdaptiveQuantile {
            initial_clip: default_initial_clip(),
            target_quantile: default_quantile(),
            learning_rate: default_clip_lr(),
            noise_multiplier: default_noise(),
            seed: 0,
        }
    }

    /// Short label used in reports: `mean`, `dpf` or `pqep`.
    pub fn label(&self) -> &'static str {
        match self {
            AggregatorSpec::Mean { .. } => "mean",
            AggregatorSpec::Dp { .. } => "dpf",
            AggregatorSpec::AdaptiveQuantile { .. } => "pqep",
        }
    }

    /// Same spec with its noise seed replaced.
    pub fn with_seed(&self, new_seed: u64) -> Self {
        let mut s = self.clone();
        match &mut s {
            AggregatorSpec::Mean { .. } => {}
            AggregatorSpec::Dp { seed, .. } | AggregatorSpec::AdaptiveQuantile { seed, .. } => *seed = new_seed,
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match *self {
            AggregatorSpec::Mean { .. } => Ok(()),
            AggregatorSpec::Dp {
                clip_norm,
                noise_multiplier,
                ..
            } => {
                if !(clip_norm > 0.0) {
                    return bad(format!("clip_norm must be positive, got {clip_norm}"));
                }
                if !(noise_multiplier >= 0.0 && noise_multiplier.is_finite()) {
                    return bad(format!("noise_multiplier must be non-negative, got {noise_multiplier}"));
                }
                Ok(())
            }
            AggregatorSpec::AdaptiveQuantile {
                initial_clip,
                target_quantile,
                learning_rate,
                noise_multiplier,
                ..
            } => {
                if !(initial_clip > 0.0 && initial_clip.is_finite()) {
                    return bad(format!("initial_clip must be positive, got {initial_clip}"));
                }
                if !(target_quantile > 0.0 && target_quantile < 1.0) {
                    return bad(format!("target_quantile {target_quantile} outside (0, 1)"));
                }
                if !(learning_rate > 0.0 && learning_rate.is_finite()) {
                    return bad(format!("learning_rate must be positive, got {learning_rate}"));
                }
                if !(noise_multiplier >= 0.0 && noise_multiplier.is_finite()) {
                    return bad(format!("noise_multiplier must be non-negative, got {noise_multiplier}"));
                }
                Ok(())
            }
        }
    }
}

/// L2 norm of all tensors of `delta` taken together.
pub fn flatten_norm(delta: &ModelWeights) -> f64 {
    delta
        .iter()
        .flat_map(|(_, t)| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Scales `update` down to norm `clip_norm` if it is longer; otherwise
/// returns it unchanged.
pub fn clip(update: &ClientUpdate, clip_norm: f64) -> ClientUpdate {
    let norm = flatten_norm(&update.delta);
    if norm <= clip_norm {
        return update.clone();
    }
    let scale = clip_norm / norm;
    ClientUpdate {
        delta: update.delta.map(|v| (v as f64 * scale) as f32),
        ..update.clone()
    }
}

fn sorted(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Config("aggregation needs at least one update".into()))?;
    for u in &updates[1..] {
        first.delta.check_layout(&u.delta)?;
    }
    let mut v: Vec<&ClientUpdate> = updates.iter().collect();
    v.sort_by_key(|u| u.client_id);
    Ok(v)
}

/// `Σ wᵢ·xᵢ / Σ wᵢ` elementwise in f64, plus optional Gaussian noise of
/// standard deviation `noise_std`, rounded once to f32.
fn combine(updates: &[&ClientUpdate], weights: &[f64], noise: Option<(f64, &mut Stream)>) -> ModelWeights {
    let total: f64 = weights.iter().sum();
    let template = &updates[0].delta;
    let mut out = ModelWeights::new();
    let mut noise = noise.map(|(std, rng)| (Normal::new(0.0, std).expect("finite std"), rng));
    for (ti, (name, t)) in template.iter().enumerate() {
        let mut acc = vec![0.0f64; t.len()];
        for (u, &w) in updates.iter().zip(weights) {
            for (a, &v) in acc.iter_mut().zip(u.delta.tensor(ti).data()) {
                *a += w * v as f64;
            }
        }
        let data = acc
            .into_iter()
            .map(|a| {
                let mut m = a / total;
                if let Some((dist, rng)) = noise.as_mut() {
                    m += dist.sample(*rng);
                }
                m as f32
            })
            .collect();
        out.push(name, Tensor::new(t.shape().to_vec(), data).expect("template shape"))
            .expect("unique names");
    }
    out
}

/// Elementwise mean of the deltas, or the example-count-weighted mean when
/// `weighted` is set.
pub fn aggregate_mean(updates: &[ClientUpdate], weighted: bool) -> Result<ModelWeights> {
    let us = sorted(updates)?;
    let w: Vec<f64> = if weighted {
        if us.iter().all(|u| u.num_examples == 0) {
            return Err(Error::Config("weighted mean over updates with no examples".into()));
        }
        us.iter().map(|u| u.num_examples as f64).collect()
    } else {
        vec![1.0; us.len()]
    };
    Ok(combine(&us, &w, None))
}

/// Clips every update to `clip_norm`, averages, and adds Gaussian noise with
/// per-element standard deviation `noise_multiplier · clip_norm / K`. With a
/// zero multiplier no noise is drawn.
pub fn aggregate_dp(updates: &[ClientUpdate], clip_norm: f64, noise_multiplier: f64, rng: &mut Stream) -> Result<ModelWeights> {
    if !(clip_norm > 0.0) {
        return Err(Error::Config(format!("clip_norm must be positive, got {clip_norm}")));
    }
    let clipped: Vec<ClientUpdate> = updates.iter().map(|u| clip(u, clip_norm)).collect();
    let us = sorted(&clipped)?;
    let k = us.len() as f64;
    let std = noise_multiplier * clip_norm / k;
    let noise = (std > 0.0).then_some((std, rng));
    Ok(combine(&us, &vec![1.0; us.len()], noise))
}

/// Geometric clip update: `C · exp(−η·(b̄ − γ))`.
pub fn adaptive_clip_update(clip_norm: f64, unclipped_fraction: f64, target_quantile: f64, learning_rate: f64) -> f64 {
    clip_norm * (-learning_rate * (unclipped_fraction - target_quantile)).exp()
}

/// Result of one aggregation.
#[derive(Clone, Debug)]
pub struct Aggregate {
    pub delta: ModelWeights,
    /// Clip norm applied this round, if any.
    pub clip_norm: Option<f64>,
    /// Fraction of updates whose norm exceeded the clip.
    pub clipped_fraction: f64,
}

/// A spec plus the state it carries between rounds.
#[derive(Clone, Debug)]
pub struct Aggregator {
    spec: AggregatorSpec,
    clip_norm: Option<f64>,
    step: u64,
    rng: Stream,
}

impl Aggregator {
    pub fn new(spec: AggregatorSpec) -> Result<Self> {
        spec.validate()?;
        let (clip_norm, seed) = match spec {
            AggregatorSpec::Mean { .. } => (None, 0),
            AggregatorSpec::Dp { clip_norm, seed, .. } => (Some(clip_norm), seed),
            AggregatorSpec::AdaptiveQuantile { initial_clip, seed, .. } => (Some(initial_clip), seed),
        };
        Ok(Aggregator {
            spec,
            clip_norm,
            step: 0,
            rng: rng::stream_at(seed, &[0xD9]),
        })
    }

    pub fn spec(&self) -> &AggregatorSpec {
        &self.spec
    }

    /// Current clip norm (fixed or adaptive); `None` for the mean.
    pub fn clip_norm(&self) -> Option<f64> {
        self.clip_norm
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn aggregate(&mut self, updates: &[ClientUpdate]) -> Result<Aggregate> {
        let fraction_over = |c: f64| {
            updates.iter().filter(|u| flatten_norm(&u.delta) > c).count() as f64 / updates.len().max(1) as f64
        };
        let out = match self.spec {
            AggregatorSpec::Mean { weighted } => Aggregate {
                delta: aggregate_mean(updates, weighted)?,
                clip_norm: None,
                clipped_fraction: 0.0,
            },
            AggregatorSpec::Dp {
                clip_norm,
                noise_multiplier,
                ..
            } => Aggregate {
                delta: aggregate_dp(updates, clip_norm, noise_multiplier, &mut self.rng)?,
                clip_norm: Some(clip_norm),
                clipped_fraction: fraction_over(clip_norm),
            },
            AggregatorSpec::AdaptiveQuantile {
                target_quantile,
                learning_rate,
                noise_multiplier,
                ..
            } => {
                let c = self.clip_norm.expect("adaptive state has a clip");
                let delta = aggregate_dp(updates, c, noise_multiplier, &mut self.rng)?;
                let over = fraction_over(c);
                let next = adaptive_clip_update(c, 1.0 - over, target_quantile, learning_rate);
                if !(next > 0.0 && next.is_finite()) {
                    return Err(Error::NonFinite { op: "adaptive clip" });
                }
                self.clip_norm = Some(next);
                Aggregate {
                    delta,
                    clip_norm: Some(c),
                    clipped_fraction: over,
                }
            }
        };
        self.step += 1;
        Ok(out)
    }
}
