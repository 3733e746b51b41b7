//! Decoding, resizing and PNG output.

use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};

use super::{ImageSample, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Tensor;

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: "zero-sized image".into(),
        });
    }
    Ok(img)
}

/// Nearest-neighbour resize of an `h × w × c` buffer. Target pixel `i` reads
/// source pixel `⌊(i + ½)·h / th⌋`.
pub fn nearest_resize<T: Copy>(src: &[T], h: usize, w: usize, c: usize, th: usize, tw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(th * tw * c);
    for i in 0..th {
        let si = (((2 * i + 1) * h) / (2 * th)).min(h - 1);
        for j in 0..tw {
            let sj = (((2 * j + 1) * w) / (2 * tw)).min(w - 1);
            let at = (si * w + sj) * c;
            out.extend_from_slice(&src[at..at + c]);
        }
    }
    out
}

/// Loads one record at `h × w`. The image is bilinearly resized and multiplied
/// by `rescale`; the mask is read as grey levels, nearest-neighbour resized,
/// thresholded at half scale and replicated across three channels.
pub fn load_sample(record: &ManifestRecord, base: &Path, h: usize, w: usize, rescale: f32) -> Result<ImageSample> {
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("target size {h}x{w} has a zero extent")));
    }
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let mut rgb = decode(&resolve(&record.image_path))?.to_rgb8();
    if rgb.dimensions() != (w as u32, h as u32) {
        rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
    }
    let image = Tensor::new([h, w, 3], rgb.as_raw().iter().map(|&v| v as f32 * rescale).collect())?;

    let grey = decode(&resolve(&record.mask_path))?.to_luma8();
    let (mw, mh) = grey.dimensions();
    let resized = nearest_resize(grey.as_raw(), mh as usize, mw as usize, 1, h, w);
    let mask = resized
        .iter()
        .flat_map(|&v| {
            let b = if v as f32 >= 127.5 { 1.0 } else { 0.0 };
            [b; 3]
        })
        .collect();
    Ok(ImageSample {
        id: record.id(),
        image,
        mask: Tensor::new([h, w, 3], mask)?,
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[0, 1]` image tensor (`H × W × 3`) to 8-bit RGB.
pub fn tensor_to_rgb8(t: &Tensor<f32>) -> Result<RgbImage> {
    let (h, w) = match t.shape() {
        &[h, w, 3] => (h, w),
        s => return Err(Error::shape("rgb image", s, &[0, 0, 3])),
    };
    Ok(RgbImage::from_raw(w as u32, h as u32, t.data().iter().map(|&v| to_u8(v)).collect()).expect("sized buffer"))
}

/// Binary mask tensor (`H × W × C`) to a 0/255 grey image from channel 0.
pub fn mask_to_rgb8(t: &Tensor<f32>) -> Result<GrayImage> {
    let (h, w, c) = match t.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::shape("mask image", s, &[0, 0, 1])),
    };
    let data = t.data().chunks(c).map(|px| to_u8(px[0])).collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, data).expect("sized buffer"))
}

pub(crate) fn encode_png<P, C>(img: &image::ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Decode {
        path: "<png>".into(),
        message: e.to_string(),
    })?;
    Ok(out.into_inner())
}

/// Writes `images/{id}.png`, `masks/{id}.png` and a `manifest.jsonl` listing
/// them with the given splits. Returns the manifest path.
pub fn write_dataset(samples: &[(ImageSample, Split)], out_dir: &Path) -> Result<std::path::PathBuf> {
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = String::new();
    for (s, split) in samples {
        let img_rel = Path::new("images").join(format!("{}.png", s.id));
        let mask_rel = Path::new("masks").join(format!("{}.png", s.id));
        fsio::write_atomic(&out_dir.join(&img_rel), &encode_png(&tensor_to_rgb8(&s.image)?)?)?;
        fsio::write_atomic(&out_dir.join(&mask_rel), &encode_png(&mask_to_rgb8(&s.mask)?)?)?;
        let rec = ManifestRecord {
            id: Some(s.id.clone()),
            image_path: img_rel,
            mask_path: mask_rel,
            split: *split,
        };
        manifest.push_str(&serde_json::to_string(&rec)?);
        manifest.push('\n');
    }
    let path = out_dir.join("manifest.jsonl");
    fsio::write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}
