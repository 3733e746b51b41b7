//! Whole-split evaluation and the metrics CSV.

use std::path::Path;

use super::{auc, bce, dice, rmse, scd, ssim, ConfusionCounts, MetricsConfig, Rate};
use crate::dataset::{stack, ImageSample};
use crate::error::{Error, Result};
use crate::fsio;
use crate::unet::UNetModel;

/// Metric columns of the CSV, in order, after the `run` and `split` columns.
pub const METRICS_COLUMNS: [&str; 16] = [
    "dice",
    "bce",
    "bce_dice",
    "iou",
    "rmse",
    "ssim",
    "cosine_similarity",
    "scd",
    "accuracy",
    "recall",
    "precision",
    "f1",
    "auc",
    "samples",
    "dice_per_image",
    "iou_per_image",
];

/// First line of every metrics CSV, defining the less standard columns.
pub const METRICS_HEADER_NOTE: &str = "# dice, iou, accuracy, recall, precision, f1: pixels pooled over the split, \
predictions binarized at the threshold; bce, bce_dice (= bce + 1 - soft dice), rmse, auc: pooled soft predictions; \
ssim, cosine_similarity: mean over images; scd: sum over images of (1 - cosine similarity of flattened prediction \
and truth); *_per_image: mean over images";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub dice: f64,
    pub bce: f64,
    pub bce_dice: f64,
    pub iou: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub cosine_similarity: f64,
    pub scd: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub auc: f64,
    pub samples: usize,
    pub dice_per_image: f64,
    pub iou_per_image: f64,
    pub confusion: ConfusionCounts,
    /// Metrics whose denominator was zero and were reported as 0.
    pub degenerate: Vec<&'static str>,
}

impl MetricsReport {
    /// Values in [`METRICS_COLUMNS`] order.
    pub fn values(&self) -> [f64; 16] {
        [
            self.dice,
            self.bce,
            self.bce_dice,
            self.iou,
            self.rmse,
            self.ssim,
            self.cosine_similarity,
            self.scd,
            self.accuracy,
            self.recall,
            self.precision,
            self.f1,
            self.auc,
            self.samples as f64,
            self.dice_per_image,
            self.iou_per_image,
        ]
    }

    /// Computes the report from per-sample truth and predictions
    /// (`H × W × C` each, flattened).
    pub fn from_predictions(
        truth: &[&[f32]],
        pred: &[&[f32]],
        (h, w, c): (usize, usize, usize),
        config: &MetricsConfig,
    ) -> Result<Self> {
        config.validate()?;
        if truth.len() != pred.len() {
            return Err(Error::shape("metrics", &[truth.len()], &[pred.len()]));
        }
        if truth.is_empty() {
            return Err(Error::Config("cannot evaluate an empty split".into()));
        }
        let thr = config.binarize_threshold;
        let mut r = MetricsReport {
            samples: truth.len(),
            ..Default::default()
        };
        let mut confusion = ConfusionCounts::default();
        let (mut inter_soft, mut sum_soft, mut bce_sum, mut sq_sum, mut ssim_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut dice_img, mut iou_img) = (0.0, 0.0);
        let mut degenerate_images = false;
        let mut n_elems = 0usize;
        for (&t, &p) in truth.iter().zip(pred) {
            if t.len() != h * w * c || p.len() != t.len() {
                return Err(Error::shape("metrics sample", &[t.len(), p.len()], &[h, w, c]));
            }
            let ci = ConfusionCounts::from_threshold(t, p, thr)?;
            confusion.merge(&ci);
            let bin: Vec<f32> = p.iter().map(|&v| if v as f64 >= thr { 1.0 } else { 0.0 }).collect();
            dice_img += dice(t, &bin, config.dice_epsilon)?;
            let iou = ci.iou();
            degenerate_images |= iou.degenerate;
            iou_img += iou.value;
            for (&a, &b) in t.iter().zip(p) {
                let (a, b) = (a as f64, b as f64);
                inter_soft += a * b;
                sum_soft += a + b;
            }
            bce_sum += bce(t, p)? * t.len() as f64;
            sq_sum += rmse(t, p)?.powi(2) * t.len() as f64;
            ssim_sum += ssim(t, p, h, w, c, config)?;
            n_elems += t.len();
        }
        let n = truth.len() as f64;
        let cos = scd(truth.iter().copied().zip(pred.iter().copied()))?;
        let soft_dice = 2.0 * inter_soft / (sum_soft + config.dice_epsilon);

        let mut take = |name: &'static str, rate: Rate| {
            if rate.degenerate {
                r.degenerate.push(name);
            }
            rate.value
        };
        let tp = confusion.tp as f64;
        r.dice = 2.0 * tp / (2.0 * tp + (confusion.fp + confusion.fn_) as f64 + config.dice_epsilon);
        r.iou = take("iou", confusion.iou());
        r.accuracy = take("accuracy", confusion.accuracy());
        r.recall = take("recall", confusion.recall());
        r.precision = take("precision", confusion.precision());
        r.f1 = take("f1", confusion.f1());
        if degenerate_images {
            r.degenerate.push("iou_per_image");
        }
        if cos.zero_vectors > 0 {
            r.degenerate.push("cosine_similarity");
        }
        r.bce = bce_sum / n_elems as f64;
        r.bce_dice = r.bce + 1.0 - soft_dice;
        r.rmse = (sq_sum / n_elems as f64).sqrt();
        r.ssim = ssim_sum / n;
        r.cosine_similarity = cos.mean;
        r.scd = cos.scd;
        r.dice_per_image = dice_img / n;
        r.iou_per_image = iou_img / n;
        r.confusion = confusion;

        let scores: Vec<f32> = pred.iter().flat_map(|p| p.iter().copied()).collect();
        let labels: Vec<bool> = truth.iter().flat_map(|t| t.iter().map(|&v| v as f64 >= thr)).collect();
        r.auc = auc(&scores, &labels)?;
        Ok(r)
    }
}

/// Runs `model` in inference mode over `samples` and scores the predictions.
pub fn evaluate(model: &UNetModel, samples: &[ImageSample], config: &MetricsConfig) -> Result<MetricsReport> {
    config.validate()?;
    let (images, _) = stack(samples)?;
    let pred = model.predict(&images, config.batch_size)?;
    let [_, h, w, c] = pred.nhwc()?;
    let per = h * w * c;
    let truth: Vec<&[f32]> = samples.iter().map(|s| s.mask.data()).collect();
    if let Some(s) = samples.iter().find(|s| s.mask.len() != per) {
        return Err(Error::shape("evaluate mask", s.mask.shape(), &[h, w, c]));
    }
    let preds: Vec<&[f32]> = pred.data().chunks_exact(per).collect();
    MetricsReport::from_predictions(&truth, &preds, (h, w, c), config)
}

/// Encodes `rows` of `(run, split, report)` as CSV, led by the
/// [`METRICS_HEADER_NOTE`] comment line.
pub fn metrics_csv(rows: &[(String, String, MetricsReport)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(METRICS_HEADER_NOTE.as_bytes());
    out.push(b'\n');
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<&str> = ["run", "split"].into_iter().chain(METRICS_COLUMNS).collect();
    w.write_record(&header)?;
    for (run, split, r) in rows {
        let mut rec = vec![run.clone(), split.clone()];
        rec.extend(METRICS_COLUMNS.iter().zip(r.values()).map(|(name, v)| {
            if *name == "samples" {
                format!("{}", v as usize)
            } else {
                format!("{v}")
            }
        }));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::io("<metrics csv>", e.into_error()))
}

/// Writes [`metrics_csv`] to `path`, atomically.
pub fn write_metrics_csv(path: &Path, rows: &[(String, String, MetricsReport)]) -> Result<()> {
    fsio::write_atomic(path, &metrics_csv(rows)?)
}
