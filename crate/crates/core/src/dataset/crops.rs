//! Plate crops from predicted masks.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::io::{encode_png, tensor_to_rgb8};
use super::ImageSample;
use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Tensor;

/// One line of the crop report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CropRow {
    pub id: String,
    /// Empty when the mask had no foreground.
    pub file: String,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub area: usize,
    pub status: &'static str,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CropReport {
    pub files: Vec<PathBuf>,
    pub rows: Vec<CropRow>,
}

/// Largest 4-connected foreground component: `((top, left, bottom, right), area)`
/// with exclusive bottom/right. Ties keep the component found first in scan
/// order.
fn largest_component(fg: &[bool], h: usize, w: usize) -> Option<((usize, usize, usize, usize), usize)> {
    let mut seen = vec![false; fg.len()];
    let mut best: Option<((usize, usize, usize, usize), usize)> = None;
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut top, mut left, mut bottom, mut right, mut area) = (h, w, 0, 0, 0);
        while let Some(p) = queue.pop_front() {
            let (i, j) = (p / w, p % w);
            area += 1;
            top = top.min(i);
            left = left.min(j);
            bottom = bottom.max(i + 1);
            right = right.max(j + 1);
            let mut visit = |q: usize| {
                if fg[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if i > 0 {
                visit(p - w);
            }
            if i + 1 < h {
                visit(p + w);
            }
            if j > 0 {
                visit(p - 1);
            }
            if j + 1 < w {
                visit(p + 1);
            }
        }
        if best.is_none_or(|(_, a)| area > a) {
            best = Some(((top, left, bottom, right), area));
        }
    }
    best
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// For each sample, writes `{id}.png` holding the tight box around the
/// largest connected foreground component of its predicted mask, plus a
/// `crops.csv` report with one row per sample. A pixel is foreground when
/// the channel mean of the (binarized) mask is at least ½. Images must be
/// in `[0, 1]`.
pub fn export_crops(samples: &[ImageSample], predicted: &[Tensor<f32>], out_dir: &Path) -> Result<CropReport> {
    if samples.len() != predicted.len() {
        return Err(Error::shape("export crops", &[samples.len()], &[predicted.len()]));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = CropReport::default();
    for (s, m) in samples.iter().zip(predicted) {
        let (h, w) = s.size();
        let c = match m.shape() {
            &[mh, mw, c] if (mh, mw) == (h, w) => c,
            other => return Err(Error::shape("export crops mask", other, &[h, w, 1])),
        };
        let fg: Vec<bool> = m
            .data()
            .chunks_exact(c)
            .map(|px| px.iter().sum::<f32>() / c as f32 >= 0.5)
            .collect();
        let Some(((top, left, bottom, right), area)) = largest_component(&fg, h, w) else {
            report.rows.push(CropRow {
                id: s.id.clone(),
                file: String::new(),
                top: 0,
                left: 0,
                height: 0,
                width: 0,
                area: 0,
                status: "empty_mask",
            });
            continue;
        };
        let ic = s.image.shape()[2];
        let mut data = Vec::with_capacity((bottom - top) * (right - left) * ic);
        for i in top..bottom {
            let row = (i * w + left) * ic;
            data.extend_from_slice(&s.image.data()[row..row + (right - left) * ic]);
        }
        let crop = Tensor::new([bottom - top, right - left, ic], data)?;
        let name = format!("{}.png", safe_name(&s.id));
        let path = out_dir.join(&name);
        fsio::write_atomic(&path, &encode_png(&tensor_to_rgb8(&crop)?)?)?;
        report.files.push(path);
        report.rows.push(CropRow {
            id: s.id.clone(),
            file: name,
            top,
            left,
            height: bottom - top,
            width: right - left,
            area,
            status: "ok",
        });
    }
    let mut csv = csv::Writer::from_writer(Vec::new());
    for row in &report.rows {
        csv.serialize(row)?;
    }
    let bytes = csv.into_inner().map_err(|e| Error::io(out_dir, e.into_error()))?;
    fsio::write_atomic(&out_dir.join("crops.csv"), &bytes)?;
    Ok(report)
}
