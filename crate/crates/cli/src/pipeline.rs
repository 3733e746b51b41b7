//! Data preparation and model loading shared by the commands.

use std::path::Path;

use fedseg::dataset::{build_training_set, load_manifest, normalize, DatasetStats, ImageSample, Split};
use fedseg::unet::{load_checkpoint, UNetModel};
use fedseg::{Error, Result};

use crate::config::RunConfig;

/// Raw samples of both splits, decoded once.
pub struct RawData {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

pub fn load_raw(cfg: &RunConfig, manifest: &Path) -> Result<RawData> {
    let m = load_manifest(manifest)?;
    let (h, w, r) = (cfg.unet.input_h, cfg.unet.input_w, cfg.augment.rescale);
    let train = m.load_split(Split::Train, h, w, r)?;
    let test = m.load_split(Split::Test, h, w, r)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "{} needs both splits; found {} train and {} test records",
            manifest.display(),
            train.len(),
            test.len()
        )));
    }
    Ok(RawData { train, test })
}

/// Training set (normalized plus augmented copies) and normalized test set.
pub struct Prepared {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub stats: Option<DatasetStats>,
}

pub fn prepare(cfg: &RunConfig, raw: &RawData) -> Result<Prepared> {
    let stats = if cfg.augment.needs_stats() {
        Some(DatasetStats::compute(&raw.train)?)
    } else {
        None
    };
    let train = build_training_set(&raw.train, &cfg.augment, stats.as_ref())?;
    let test = normalize_all(&raw.test, cfg, stats.as_ref())?;
    Ok(Prepared { train, test, stats })
}

pub fn normalize_all(samples: &[ImageSample], cfg: &RunConfig, stats: Option<&DatasetStats>) -> Result<Vec<ImageSample>> {
    samples.iter().map(|s| normalize(s, &cfg.augment, stats)).collect()
}

/// Builds the configured network and loads `checkpoint` into it.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<UNetModel> {
    let weights = load_checkpoint(checkpoint)?;
    let model = UNetModel::build(&cfg.unet)?;
    model.weights().check_layout(&weights).map_err(|e| {
        Error::Config(format!(
            "{} does not fit the configured network ({e})",
            checkpoint.display()
        ))
    })?;
    model.with_weights(weights)
}
