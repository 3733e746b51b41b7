//! Independent reference computations for tests.
//!
//! Everything here is written the slow, obvious way over plain `f64` slices
//! and shares no code with `fedseg`. Tests compare the optimized paths
//! against these.

use std::collections::VecDeque;

/// Same-padded stride-1 convolution by direct summation. NHWC input,
/// `kh × kw × cin × cout` kernel.
pub fn conv2d_same(
    x: &[f64],
    [n, h, w, cin]: [usize; 4],
    k: &[f64],
    [kh, kw, kcin, cout]: [usize; 4],
    bias: &[f64],
) -> Vec<f64> {
    assert_eq!(cin, kcin);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = vec![0.0; n * h * w * cout];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = y as i64 + ky as i64 - ph as i64;
                            let ix = xx as i64 + kx as i64 - pw as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x[((b * h + iy as usize) * w + ix as usize) * cin + ci];
                                let kv = k[((ky * kw + kx) * cin + ci) * cout + co];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * h + y) * w + xx) * cout + co] = acc;
                }
            }
        }
    }
    out
}

/// Transposed convolution with stride equal to the kernel extent `s`, by
/// scattering each input pixel through the kernel. NHWC input,
/// `s × s × cin × cout` kernel.
pub fn conv_transpose(
    x: &[f64],
    [n, h, w, cin]: [usize; 4],
    k: &[f64],
    s: usize,
    cout: usize,
    bias: &[f64],
) -> Vec<f64> {
    let (ho, wo) = (h * s, w * s);
    let mut out = vec![0.0; n * ho * wo * cout];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    out[((b * ho + oy) * wo + ox) * cout + co] = bias[co];
                }
            }
        }
        for y in 0..h {
            for xx in 0..w {
                for ky in 0..s {
                    for kx in 0..s {
                        for ci in 0..cin {
                            for co in 0..cout {
                                let o = ((b * ho + y * s + ky) * wo + xx * s + kx) * cout + co;
                                out[o] += x[((b * h + y) * w + xx) * cin + ci]
                                    * k[((ky * s + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2×2 stride-2 max pooling by direct window scan.
pub fn maxpool2(x: &[f64], [n, h, w, c]: [usize; 4]) -> Vec<f64> {
    let mut out = Vec::new();
    for b in 0..n {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                for ch in 0..c {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x[((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

/// Central finite differences of a scalar function of several flat inputs.
pub fn central_difference(
    f: &mut dyn FnMut(&[Vec<f64>]) -> f64,
    inputs: &[Vec<f64>],
    step: f64,
) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = work[i][j];
            work[i][j] = orig + step;
            let up = f(&work);
            work[i][j] = orig - step;
            let down = f(&work);
            work[i][j] = orig;
            g.push((up - down) / (2.0 * step));
        }
        grads.push(g);
    }
    grads
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// AUC as P(score⁺ > score⁻) + ½·P(tie), by enumerating all pairs.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Single-channel SSIM: uniform `win × win` windows at every valid position,
/// population statistics, averaged. Falls back to one global window when the
/// image is smaller than the window.
pub fn ssim_direct(x: &[f64], y: &[f64], h: usize, w: usize, win: usize, c1: f64, c2: f64) -> f64 {
    let (wh, ww) = if h < win || w < win { (h, w) } else { (win, win) };
    let mut total = 0.0;
    let mut count = 0.0;
    for top in 0..=(h - wh) {
        for left in 0..=(w - ww) {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for r in top..top + wh {
                for c in left..left + ww {
                    xs.push(x[r * w + c]);
                    ys.push(y[r * w + c]);
                }
            }
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
            let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
            let cxy = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

/// Bounding box `(top, left, bottom_exclusive, right_exclusive)` and area of
/// the largest 4-connected foreground component, by breadth-first flood fill.
/// Ties keep the component found first in row-major scan order.
pub fn largest_component(mask: &[bool], h: usize, w: usize) -> Option<((usize, usize, usize, usize), usize)> {
    let mut seen = vec![false; h * w];
    let mut best: Option<((usize, usize, usize, usize), usize)> = None;
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        let (mut t, mut l, mut b, mut r, mut area) = (h, w, 0, 0, 0);
        while let Some(i) = q.pop_front() {
            let (y, x) = (i / w, i % w);
            area += 1;
            t = t.min(y);
            l = l.min(x);
            b = b.max(y + 1);
            r = r.max(x + 1);
            let mut nb = Vec::new();
            if y > 0 {
                nb.push(i - w);
            }
            if y + 1 < h {
                nb.push(i + w);
            }
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < w {
                nb.push(i + 1);
            }
            for j in nb {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    q.push_back(j);
                }
            }
        }
        if best.is_none_or(|(_, a)| area > a) {
            best = Some(((t, l, b, r), area));
        }
    }
    best
}

/// Nearest-neighbour resize of an `h × w × c` image: destination pixel `i`
/// samples source index `floor((i + ½)·src/dst)`.
pub fn nearest_resize(src: &[f64], h: usize, w: usize, c: usize, th: usize, tw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(th * tw * c);
    for y in 0..th {
        let sy = (((y as f64 + 0.5) * h as f64 / th as f64).floor() as usize).min(h - 1);
        for x in 0..tw {
            let sx = (((x as f64 + 0.5) * w as f64 / tw as f64).floor() as usize).min(w - 1);
            for ch in 0..c {
                out.push(src[(sy * w + sx) * c + ch]);
            }
        }
    }
    out
}

/// Closed-form parameter counts of the segmentation network, recomputed from
/// its filter schedule. Returns `(layer kind, parameter count)` for every
/// parameterized layer in build order, with `filters` scaled by
/// `scale_num / scale_den`.
pub fn unet_parameter_counts(
    in_channels: usize,
    out_channels: usize,
    scale_num: usize,
    scale_den: usize,
) -> Vec<(&'static str, usize)> {
    let s = |f: usize| f * scale_num / scale_den;
    let conv = |k: usize, cin: usize, cout: usize| cout * (k * k * cin + 1);
    let bn = |c: usize| 4 * c;
    let mut rows = Vec::new();
    let enc = [(32, 16), (64, 32), (128, 64), (256, 128), (512, 256)];
    let mut cin = in_channels;
    let mut skips = Vec::new();
    for (a, b) in enc {
        rows.push(("conv", conv(3, cin, s(a))));
        rows.push(("conv", conv(3, s(a), s(b))));
        rows.push(("bn", bn(s(b))));
        skips.push(s(b));
        cin = s(b);
    }
    skips.pop();
    for (i, skip) in skips.into_iter().rev().enumerate() {
        rows.push(("convT", conv(2, cin, skip)));
        let cat = 2 * skip;
        if i == 0 {
            rows.push(("conv", conv(3, cat, cat)));
            rows.push(("conv", conv(3, cat, cat)));
            rows.push(("bn", bn(cat)));
        } else {
            rows.push(("conv", conv(3, cat, cat)));
            rows.push(("bn", bn(cat)));
            rows.push(("conv", conv(3, cat, cat)));
            rows.push(("bn", bn(cat)));
        }
        cin = cat;
    }
    rows.push(("conv", conv(1, cin, out_channels)));
    rows
}

/// Published layer summary of the reference architecture at 192×192×3 input:
/// `(layer name, output shape without batch, parameter count)`.
pub const REFERENCE_LAYER_TABLE: &[(&str, [usize; 3], usize)] = &[
    ("img", [192, 192, 3], 0),
    ("conv2d", [192, 192, 32], 896),
    ("conv2d_1", [192, 192, 16], 4624),
    ("batch_normalization", [192, 192, 16], 64),
    ("dropout", [192, 192, 16], 0),
    ("max_pooling2d", [96, 96, 16], 0),
    ("conv2d_2", [96, 96, 64], 9280),
    ("conv2d_3", [96, 96, 32], 18464),
    ("dropout_1", [96, 96, 32], 0),
    ("batch_normalization_1", [96, 96, 32], 128),
    ("max_pooling2d_1", [48, 48, 32], 0),
    ("conv2d_4", [48, 48, 128], 36992),
    ("conv2d_5", [48, 48, 64], 73792),
    ("batch_normalization_2", [48, 48, 64], 256),
    ("dropout_2", [48, 48, 64], 0),
    ("max_pooling2d_2", [24, 24, 64], 0),
    ("conv2d_6", [24, 24, 256], 147712),
    ("conv2d_7", [24, 24, 128], 295040),
    ("batch_normalization_3", [24, 24, 128], 512),
    ("dropout_3", [24, 24, 128], 0),
    ("max_pooling2d_3", [12, 12, 128], 0),
    ("conv2d_8", [12, 12, 512], 590336),
    ("conv2d_9", [12, 12, 256], 1179904),
    ("batch_normalization_4", [12, 12, 256], 1024),
    ("dropout_4", [12, 12, 256], 0),
    ("conv2d_transpose", [24, 24, 128], 131200),
    ("concatenate", [24, 24, 256], 0),
    ("conv2d_10", [24, 24, 256], 590080),
    ("conv2d_11", [24, 24, 256], 590080),
    ("batch_normalization_5", [24, 24, 256], 1024),
    ("dropout_5", [24, 24, 256], 0),
    ("conv2d_transpose_1", [48, 48, 64], 65600),
    ("concatenate_1", [48, 48, 128], 0),
    ("conv2d_12", [48, 48, 128], 147584),
    ("batch_normalization_6", [48, 48, 128], 512),
    ("dropout_6", [48, 48, 128], 0),
    ("conv2d_13", [48, 48, 128], 147584),
    ("batch_normalization_7", [48, 48, 128], 512),
    ("add_1", [48, 48, 128], 0),
    ("conv2d_transpose_2", [96, 96, 32], 16416),
    ("concatenate_2", [96, 96, 64], 0),
    ("conv2d_14", [96, 96, 64], 36928),
    ("batch_normalization_8", [96, 96, 64], 256),
    ("dropout_7", [96, 96, 64], 0),
    ("conv2d_15", [96, 96, 64], 36928),
    ("batch_normalization_9", [96, 96, 64], 256),
    ("add_2", [96, 96, 64], 0),
    ("conv2d_transpose_3", [192, 192, 16], 4112),
    ("concatenate_3", [192, 192, 32], 0),
    ("conv2d_16", [192, 192, 32], 9248),
    ("batch_normalization_10", [192, 192, 32], 128),
    ("dropout_8", [192, 192, 32], 0),
    ("conv2d_17", [192, 192, 32], 9248),
    ("batch_normalization_11", [192, 192, 32], 128),
    ("add_3", [192, 192, 32], 0),
    ("conv2d_18", [192, 192, 3], 99),
];

/// Published totals: (total, trainable, non-trainable).
pub const REFERENCE_TOTALS: (usize, usize, usize) = (4_146_947, 4_144_547, 2_400);

/// Pearson χ² statistic of observed counts against a uniform expectation.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_table_sums_to_reference_totals() {
        let total: usize = REFERENCE_LAYER_TABLE.iter().map(|r| r.2).sum();
        let bn: usize = REFERENCE_LAYER_TABLE
            .iter()
            .filter(|r| r.0.starts_with("batch_normalization"))
            .map(|r| r.2)
            .sum();
        assert_eq!(total, REFERENCE_TOTALS.0);
        assert_eq!(bn / 2, REFERENCE_TOTALS.2);
    }

    #[test]
    fn closed_form_matches_reference_table() {
        let formula: Vec<usize> = unet_parameter_counts(3, 3, 1, 1).into_iter().map(|r| r.1).collect();
        // The reference table lists block 2 with dropout before batch norm;
        // only parameterized rows matter here.
        let mut table: Vec<usize> = REFERENCE_LAYER_TABLE.iter().map(|r| r.2).filter(|&p| p > 0).collect();
        table.sort_unstable();
        let mut sorted = formula.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, table);
        assert_eq!(formula.iter().sum::<usize>(), REFERENCE_TOTALS.0);
    }

    #[test]
    fn auc_pairs_extremes() {
        assert_eq!(auc_pairs(&[0.9, 0.1], &[true, false]), 1.0);
        assert_eq!(auc_pairs(&[0.1, 0.9], &[true, false]), 0.0);
        assert_eq!(auc_pairs(&[0.5, 0.5], &[true, false]), 0.5);
    }

    #[test]
    fn flood_fill_picks_largest() {
        #[rustfmt::skip]
        let m = [
            true, false, false, false,
            false, false, true, true,
            false, false, true, true,
        ];
        let (bbox, area) = largest_component(&m, 3, 4).unwrap();
        assert_eq!(area, 4);
        assert_eq!(bbox, (1, 2, 3, 4));
    }
}
