//! Segmentation metrics: overlap, error, similarity and ranking scores.
//!
//! All functions accumulate in `f64` and accept `f32` or `f64` slices.

mod report;

use serde::{Deserialize, Serialize};

pub use report::{evaluate, metrics_csv, write_metrics_csv, MetricsReport, METRICS_COLUMNS, METRICS_HEADER_NOTE};

use crate::error::{Error, Result};

/// Clamp applied to predictions inside logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub dice_epsilon: f64,
    pub binarize_threshold: f64,
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    /// Samples per inference batch during evaluation.
    pub batch_size: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            dice_epsilon: 1e-6,
            binarize_threshold: 0.5,
            ssim_window: 7,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
            batch_size: 16,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config(format!(
                "binarize_threshold {} outside (0, 1)",
                self.binarize_threshold
            )));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::Config(format!(
                "ssim_window must be odd and at least 3, got {}",
                self.ssim_window
            )));
        }
        if self.dice_epsilon < 0.0 || self.ssim_c1 < 0.0 || self.ssim_c2 < 0.0 || self.batch_size == 0 {
            return Err(Error::Config("metric constants must be non-negative and batch_size positive".into()));
        }
        Ok(())
    }
}

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, &[a], &[b]));
    }
    Ok(())
}

/// `2·Σ(t·p) / (Σt + Σp + ε)` on the values as given.
pub fn dice<T: Copy + Into<f64>>(truth: &[T], pred: &[T], eps: f64) -> Result<f64> {
    same_len("dice", truth.len(), pred.len())?;
    let (mut inter, mut sum) = (0.0, 0.0);
    for (&t, &p) in truth.iter().zip(pred) {
        let (t, p) = (t.into(), p.into());
        inter += t * p;
        sum += t + p;
    }
    Ok(2.0 * inter / (sum + eps))
}

/// `a·b / (‖a‖·‖b‖)`, or `None` when either vector is zero.
pub fn cosine_similarity<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<Option<f64>> {
    same_len("cosine similarity", a.len(), b.len())?;
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y): (f64, f64) = (x.into(), y.into());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some(dot / (na.sqrt() * nb.sqrt())))
}

/// Sum of cosine distances over evaluation pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CosineSummary {
    /// `Σ (1 − cos)`.
    pub scd: f64,
    /// Mean cosine similarity.
    pub mean: f64,
    pub pairs: usize,
    /// Pairs with a zero vector, counted with similarity 0.
    pub zero_vectors: usize,
}

pub fn scd<'a, T: Copy + Into<f64> + 'a>(pairs: impl IntoIterator<Item = (&'a [T], &'a [T])>) -> Result<CosineSummary> {
    let mut s = CosineSummary::default();
    let mut total = 0.0;
    for (a, b) in pairs {
        let c = match cosine_similarity(a, b)? {
            Some(c) => c,
            None => {
                s.zero_vectors += 1;
                0.0
            }
        };
        total += c;
        s.scd += 1.0 - c;
        s.pairs += 1;
    }
    if s.zero_vectors > 0 {
        log::warn!("{} evaluation pair(s) had a zero vector; cosine taken as 0", s.zero_vectors);
    }
    s.mean = if s.pairs == 0 { 0.0 } else { total / s.pairs as f64 };
    Ok(s)
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce<T: Copy + Into<f64>>(truth: &[T], pred: &[T]) -> Result<f64> {
    same_len("bce", truth.len(), pred.len())?;
    if truth.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (&t, &p) in truth.iter().zip(pred) {
        let (y, p): (f64, f64) = (t.into(), p.into());
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(total / truth.len() as f64)
}

pub fn rmse<T: Copy + Into<f64>>(truth: &[T], pred: &[T]) -> Result<f64> {
    same_len("rmse", truth.len(), pred.len())?;
    if truth.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = truth
        .iter()
        .zip(pred)
        .map(|(&t, &p)| {
            let d = t.into() - p.into();
            d * d
        })
        .sum();
    Ok((sq / truth.len() as f64).sqrt())
}

/// A ratio that may have had a zero denominator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rate {
    /// 0 when degenerate.
    pub value: f64,
    pub degenerate: bool,
}

fn rate(num: f64, den: f64) -> Rate {
    if den == 0.0 {
        Rate {
            value: 0.0,
            degenerate: true,
        }
    } else {
        Rate {
            value: num / den,
            degenerate: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Counts after thresholding both arrays: a value is positive when `≥ threshold`.
    pub fn from_threshold<T: Copy + Into<f64>>(truth: &[T], pred: &[T], threshold: f64) -> Result<Self> {
        same_len("confusion", truth.len(), pred.len())?;
        let mut c = ConfusionCounts::default();
        for (&t, &p) in truth.iter().zip(pred) {
            c.add(t.into() >= threshold, p.into() >= threshold);
        }
        Ok(c)
    }

    pub fn add(&mut self, truth: bool, pred: bool) {
        match (truth, pred) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn iou(&self) -> Rate {
        rate(self.tp as f64, (self.tp + self.fp + self.fn_) as f64)
    }

    pub fn accuracy(&self) -> Rate {
        rate((self.tp + self.tn) as f64, self.total() as f64)
    }

    pub fn recall(&self) -> Rate {
        rate(self.tp as f64, (self.tp + self.fn_) as f64)
    }

    pub fn precision(&self) -> Rate {
        rate(self.tp as f64, (self.tp + self.fp) as f64)
    }

    pub fn f1(&self) -> Rate {
        let (p, r) = (self.precision(), self.recall());
        if p.degenerate || r.degenerate {
            return Rate {
                value: 0.0,
                degenerate: true,
            };
        }
        rate(2.0 * p.value * r.value, p.value + r.value)
    }
}

/// Summed-area table with one row and column of leading zeros.
struct Integral {
    w: usize,
    s: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Self {
        let w1 = w + 1;
        let mut s = vec![0.0; (h + 1) * w1];
        for i in 0..h {
            let mut row = 0.0;
            for j in 0..w {
                row += f(i * w + j);
                s[(i + 1) * w1 + j + 1] = s[i * w1 + j + 1] + row;
            }
        }
        Integral { w: w1, s }
    }

    fn rect(&self, top: usize, left: usize, bottom: usize, right: usize) -> f64 {
        let w = self.w;
        self.s[bottom * w + right] - self.s[top * w + right] - self.s[bottom * w + left] + self.s[top * w + left]
    }
}

/// Mean SSIM over channels of two `h × w × c` images, each channel averaged
/// over every valid `win × win` window with population statistics. Images
/// smaller than the window use one global window.
pub fn ssim<T: Copy + Into<f64>>(x: &[T], y: &[T], h: usize, w: usize, c: usize, config: &MetricsConfig) -> Result<f64> {
    same_len("ssim", x.len(), y.len())?;
    if x.len() != h * w * c || x.is_empty() {
        return Err(Error::shape("ssim", &[x.len()], &[h, w, c]));
    }
    let (c1, c2) = (config.ssim_c1, config.ssim_c2);
    let (wh, ww) = if h < config.ssim_window || w < config.ssim_window {
        (h, w)
    } else {
        (config.ssim_window, config.ssim_window)
    };
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let xv = |p: usize| x[p * c + ch].into();
        let yv = |p: usize| y[p * c + ch].into();
        let sx = Integral::new(h, w, xv);
        let sy = Integral::new(h, w, yv);
        let sxx = Integral::new(h, w, |p| xv(p) * xv(p));
        let syy = Integral::new(h, w, |p| yv(p) * yv(p));
        let sxy = Integral::new(h, w, |p| xv(p) * yv(p));
        let mut acc = 0.0;
        let mut count = 0usize;
        for top in 0..=(h - wh) {
            for left in 0..=(w - ww) {
                let r = |s: &Integral| s.rect(top, left, top + wh, left + ww) / n;
                let (mx, my) = (r(&sx), r(&sy));
                let vx = r(&sxx) - mx * mx;
                let vy = r(&syy) - my * my;
                let cxy = r(&sxy) - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / c as f64)
}

/// Area under the ROC curve from a descending sweep over distinct scores,
/// integrated with trapezoids. Tied scores move along the diagonal, so
/// each tied positive/negative pair counts ½.
pub fn auc<T: Copy + Into<f64>>(scores: &[T], labels: &[bool]) -> Result<f64> {
    same_len("auc", scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::SingleClass { missing: "positive" });
    }
    if neg == 0 {
        return Err(Error::SingleClass { missing: "negative" });
    }
    let mut order: Vec<(f64, bool)> = scores.iter().map(|&s| s.into()).zip(labels.iter().copied()).collect();
    order.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0u64, 0u64);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = order[i].0;
        while i < order.len() && order[i].0 == s {
            if order[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}
