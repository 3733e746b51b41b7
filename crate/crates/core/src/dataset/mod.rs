//! Image/mask pairs: manifests, decoding, augmentation, synthetic plates and
//! crop export.

mod augment;
mod crops;
mod io;
mod synthetic;

use std::collections::HashSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use augment::{
    augment, build_training_set, normalize, shift, AugmentConfig, DatasetStats,
};
pub use crops::{export_crops, CropReport, CropRow};
pub use io::{load_sample, mask_to_rgb8, nearest_resize, tensor_to_rgb8, write_dataset};
pub use synthetic::{generate_synthetic, render_plate, PlateGeometry};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An image with its ground-truth mask, both `H × W × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// Values in `[0, 1]` at ingest; normalized values after augmentation.
    pub image: Tensor<f32>,
    /// Exactly 0 or 1, replicated across channels.
    pub mask: Tensor<f32>,
}

impl ImageSample {
    /// `(h, w)`.
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }
}

/// Stacks samples into `(images, masks)` batches of shape `N × H × W × C`.
pub fn stack<'a>(samples: impl IntoIterator<Item = &'a ImageSample>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut shape: Option<(Vec<usize>, Vec<usize>)> = None;
    let mut n = 0;
    for s in samples {
        match &shape {
            None => shape = Some((s.image.shape().to_vec(), s.mask.shape().to_vec())),
            Some((si, sm)) => {
                if si.as_slice() != s.image.shape() {
                    return Err(Error::shape("stack images", si, s.image.shape()));
                }
                if sm.as_slice() != s.mask.shape() {
                    return Err(Error::shape("stack masks", sm, s.mask.shape()));
                }
            }
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
        n += 1;
    }
    let (si, sm) = shape.ok_or_else(|| Error::Config("cannot stack an empty batch".into()))?;
    let with_n = |s: &[usize]| std::iter::once(n).chain(s.iter().copied()).collect::<Vec<_>>();
    Ok((Tensor::new(with_n(&si), images)?, Tensor::new(with_n(&sm), masks)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    /// Defaults to the image path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
}

impl ManifestRecord {
    pub fn id(&self) -> String {
        self.id
            .clone()
            .unwrap_or_else(|| self.image_path.to_string_lossy().into_owned())
    }
}

/// Records of a JSON-lines manifest. Relative paths resolve against `base_dir`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Decodes every record of `split` at `h × w`. All failures are
    /// collected and reported together.
    pub fn load_split(&self, split: Split, h: usize, w: usize, rescale: f32) -> Result<Vec<ImageSample>> {
        let mut out = Vec::new();
        let mut failures = Vec::new();
        for r in self.split(split) {
            match load_sample(r, &self.base_dir, h, w, rescale) {
                Ok(s) => out.push(s),
                Err(e) => failures.push(format!("{}: {e}", r.id())),
            }
        }
        if failures.is_empty() {
            Ok(out)
        } else {
            Err(Error::Records { failures })
        }
    }
}

/// Parses a JSON-lines manifest. Blank lines are skipped; ids and image
/// paths must be unique.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    let mut paths = HashSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        if !ids.insert(rec.id()) {
            return Err(Error::Manifest {
                line: line_no,
                message: format!("duplicate id {:?}", rec.id()),
            });
        }
        if !paths.insert(rec.image_path.clone()) {
            return Err(Error::Manifest {
                line: line_no,
                message: format!("duplicate image path {:?}", rec.image_path),
            });
        }
        records.push(rec);
    }
    Ok(DatasetManifest { base_dir, records })
}
