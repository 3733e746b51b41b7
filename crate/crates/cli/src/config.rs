//! Run configuration file.

use std::path::{Path, PathBuf};

use fedseg::aggregators::AggregatorSpec;
use fedseg::dataset::AugmentConfig;
use fedseg::federation::FLConfig;
use fedseg::metrics::MetricsConfig;
use fedseg::unet::UNetConfig;
use fedseg::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable capping concurrent client trainings.
pub const THREADS_ENV: &str = "FEDSEG_THREADS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

/// Candidates for `compare-aggregators`, selected by label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub aggregators: Vec<AggregatorSpec>,
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            aggregators: vec![AggregatorSpec::default(), AggregatorSpec::dp(), AggregatorSpec::adaptive()],
            seeds: vec![1, 2, 3],
        }
    }
}

/// Everything a run needs. A missing section takes its default; the
/// network defaults to the desk preset, but a `unet` object given in the
/// file fills its missing fields from the full-size network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub unet: UNetConfig,
    pub fl: FLConfig,
    pub augment: AugmentConfig,
    pub metrics: MetricsConfig,
    pub paths: Paths,
    pub compare: CompareConfig,
    /// When set, replaces the model, partition, augmentation and noise seeds.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            unet: UNetConfig::desk(),
            fl: FLConfig::default(),
            augment: AugmentConfig::default(),
            metrics: MetricsConfig::default(),
            paths: Paths::default(),
            compare: CompareConfig::default(),
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `path` when given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Copy with the top-level seed pushed into every seeded component.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = self.seed {
            c.unet.seed = s;
            c.fl.seed = s;
            c.augment.seed = s;
            c.fl.aggregator = c.fl.aggregator.with_seed(s);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.unet.input_channels != 3 || self.unet.output_channels != 3 {
            return Err(Error::Config(format!(
                "images and masks are loaded as RGB; input_channels and output_channels must be 3, got {} and {}",
                self.unet.input_channels, self.unet.output_channels
            )));
        }
        self.fl.validate()?;
        self.augment.validate()?;
        self.metrics.validate()?;
        for spec in &self.compare.aggregators {
            spec.validate()?;
        }
        Ok(())
    }

    /// The manifest to read: the flag if given, else the file's path, which
    /// must exist.
    pub fn manifest(&self) -> Result<PathBuf> {
        let p = self
            .paths
            .manifest
            .clone()
            .ok_or_else(|| Error::Config("no manifest given (use --manifest or paths.manifest)".into()))?;
        if !p.is_file() {
            return Err(Error::Io {
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
                path: p,
            });
        }
        Ok(p)
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        self.paths
            .output_dir
            .clone()
            .ok_or_else(|| Error::Config("no output directory given (use --out or paths.output_dir)".into()))
    }

    /// Applies the thread cap from the environment.
    pub fn apply_thread_cap(&mut self) -> Result<()> {
        let Ok(v) = std::env::var(THREADS_ENV) else {
            return Ok(());
        };
        let cap: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        let workers = self.fl.workers.unwrap_or(self.fl.num_clients).min(cap);
        self.fl.workers = Some(workers.max(1));
        Ok(())
    }
}
