//! Raw NHWC layer kernels over flat buffers. Shapes are validated by the
//! caller ([`super::Graph`]); these functions only index.

use super::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims {
    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Same-padding offsets: top/left pad for an extent-preserving window.
fn pad(k: usize) -> usize {
    (k - 1) / 2
}

/// Unfold `x` into a `(n·h·w) × (kh·kw·c)` patch matrix with zero padding.
pub(crate) fn im2col<T: Scalar>(x: &[T], d: Dims, kh: usize, kw: usize) -> Vec<T> {
    let patch = kh * kw * d.c;
    let mut cols = vec![T::zero(); d.pixels() * patch];
    let (ph, pw) = (pad(kh), pad(kw));
    for n in 0..d.n {
        for y in 0..d.h {
            for xx in 0..d.w {
                let row = ((n * d.h + y) * d.w + xx) * patch;
                for ky in 0..kh {
                    let iy = y as isize + ky as isize - ph as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = xx as isize + kx as isize - pw as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let src = ((n * d.h + iy as usize) * d.w + ix as usize) * d.c;
                        let dst = row + (ky * kw + kx) * d.c;
                        cols[dst..dst + d.c].copy_from_slice(&x[src..src + d.c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], d: Dims, kh: usize, kw: usize, dx: &mut [T]) {
    let patch = kh * kw * d.c;
    let (ph, pw) = (pad(kh), pad(kw));
    for n in 0..d.n {
        for y in 0..d.h {
            for xx in 0..d.w {
                let row = ((n * d.h + y) * d.w + xx) * patch;
                for ky in 0..kh {
                    let iy = y as isize + ky as isize - ph as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = xx as isize + kx as isize - pw as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let dst = ((n * d.h + iy as usize) * d.w + ix as usize) * d.c;
                        let src = row + (ky * kw + kx) * d.c;
                        for (o, &g) in dx[dst..dst + d.c].iter_mut().zip(&cols[src..src + d.c]) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
}

fn broadcast_bias<T: Scalar>(rows: usize, bias: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * bias.len());
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

/// Column sums of a row-major `rows × cols` matrix.
pub(crate) fn column_sums<T: Scalar>(m: &[T], cols: usize) -> Vec<T> {
    let mut s = vec![T::zero(); cols];
    for row in m.chunks_exact(cols) {
        for (a, &b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

/// Same-padded stride-1 convolution. Kernel layout `kh × kw × c_in × c_out`.
/// Returns the output and the patch matrix used (needed for backward).
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    d: Dims,
    kernel: &[T],
    kh: usize,
    kw: usize,
    c_out: usize,
    bias: &[T],
) -> (Vec<T>, Vec<T>) {
    let rows = d.pixels();
    let patch = kh * kw * d.c;
    let cols = if kh == 1 && kw == 1 {
        x.to_vec()
    } else {
        im2col(x, d, kh, kw)
    };
    let mut out = broadcast_bias(rows, bias);
    T::gemm(
        rows,
        patch,
        c_out,
        T::one(),
        &cols,
        (patch, 1),
        kernel,
        (c_out, 1),
        T::one(),
        &mut out,
        (c_out, 1),
    );
    (out, cols)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dk: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    dy: &[T],
    cols: &[T],
    d: Dims,
    kernel: &[T],
    kh: usize,
    kw: usize,
    c_out: usize,
    need_dx: bool,
) -> ConvGrads<T> {
    let rows = d.pixels();
    let patch = kh * kw * d.c;
    let mut dk = vec![T::zero(); patch * c_out];
    // dK = colsᵀ · dY
    T::gemm(
        patch,
        rows,
        c_out,
        T::one(),
        cols,
        (1, patch),
        dy,
        (c_out, 1),
        T::zero(),
        &mut dk,
        (c_out, 1),
    );
    let db = column_sums(dy, c_out);
    let dx = need_dx.then(|| {
        // dCols = dY · Kᵀ
        let mut dcols = vec![T::zero(); rows * patch];
        T::gemm(
            rows,
            c_out,
            patch,
            T::one(),
            dy,
            (c_out, 1),
            kernel,
            (1, c_out),
            T::zero(),
            &mut dcols,
            (patch, 1),
        );
        if kh == 1 && kw == 1 {
            dcols
        } else {
            let mut dx = vec![T::zero(); rows * d.c];
            col2im_add(&dcols, d, kh, kw, &mut dx);
            dx
        }
    });
    ConvGrads { dx, dk, db }
}

/// Transposed convolution whose stride equals its (square) kernel size, so
/// windows tile the output without overlap. Kernel layout
/// `s × s × c_in × c_out`; output is `n × s·h × s·w × c_out`.
pub(crate) fn conv_transpose_forward<T: Scalar>(
    x: &[T],
    d: Dims,
    kernel: &[T],
    s: usize,
    c_out: usize,
    bias: &[T],
) -> Vec<T> {
    let rows = d.pixels();
    let (ho, wo) = (d.h * s, d.w * s);
    let mut out = vec![T::zero(); d.n * ho * wo * c_out];
    let mut tmp = vec![T::zero(); rows * c_out];
    let block = d.c * c_out;
    for dy in 0..s {
        for dx in 0..s {
            let k = &kernel[(dy * s + dx) * block..][..block];
            T::gemm(
                rows,
                d.c,
                c_out,
                T::one(),
                x,
                (d.c, 1),
                k,
                (c_out, 1),
                T::zero(),
                &mut tmp,
                (c_out, 1),
            );
            for n in 0..d.n {
                for y in 0..d.h {
                    for xx in 0..d.w {
                        let src = ((n * d.h + y) * d.w + xx) * c_out;
                        let dst = ((n * ho + y * s + dy) * wo + xx * s + dx) * c_out;
                        for ((o, &t), &b) in out[dst..dst + c_out]
                            .iter_mut()
                            .zip(&tmp[src..src + c_out])
                            .zip(bias)
                        {
                            *o = t + b;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Scalar>(
    dy_full: &[T],
    x: &[T],
    d: Dims,
    kernel: &[T],
    s: usize,
    c_out: usize,
    need_dx: bool,
) -> ConvGrads<T> {
    let rows = d.pixels();
    let (ho, wo) = (d.h * s, d.w * s);
    let block = d.c * c_out;
    let mut dk = vec![T::zero(); s * s * block];
    let mut dx_buf = need_dx.then(|| vec![T::zero(); rows * d.c]);
    let mut g = vec![T::zero(); rows * c_out];
    for dy in 0..s {
        for dx in 0..s {
            for n in 0..d.n {
                for y in 0..d.h {
                    for xx in 0..d.w {
                        let dst = ((n * d.h + y) * d.w + xx) * c_out;
                        let src = ((n * ho + y * s + dy) * wo + xx * s + dx) * c_out;
                        g[dst..dst + c_out].copy_from_slice(&dy_full[src..src + c_out]);
                    }
                }
            }
            let off = (dy * s + dx) * block;
            // dK_d = Xᵀ · G_d
            T::gemm(
                d.c,
                rows,
                c_out,
                T::one(),
                x,
                (1, d.c),
                &g,
                (c_out, 1),
                T::zero(),
                &mut dk[off..off + block],
                (c_out, 1),
            );
            if let Some(dxb) = dx_buf.as_mut() {
                // dX += G_d · K_dᵀ
                T::gemm(
                    rows,
                    c_out,
                    d.c,
                    T::one(),
                    &g,
                    (c_out, 1),
                    &kernel[off..off + block],
                    (1, c_out),
                    T::one(),
                    dxb,
                    (d.c, 1),
                );
            }
        }
    }
    ConvGrads {
        dx: dx_buf,
        dk,
        db: column_sums(dy_full, c_out),
    }
}

/// 2×2 stride-2 max pool. Returns the output and, per output element, the
/// flat input index of the first maximal element in window scan order.
pub(crate) fn maxpool_forward<T: Scalar>(x: &[T], d: Dims) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (d.h / 2, d.w / 2);
    let len = d.n * ho * wo * d.c;
    let mut out = Vec::with_capacity(len);
    let mut arg = Vec::with_capacity(len);
    for n in 0..d.n {
        for y in 0..ho {
            for xx in 0..wo {
                for c in 0..d.c {
                    let mut best_i = ((n * d.h + 2 * y) * d.w + 2 * xx) * d.c + c;
                    let mut best = x[best_i];
                    for (wy, wx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((n * d.h + 2 * y + wy) * d.w + 2 * xx + wx) * d.c + c;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (out, arg)
}

/// Per-channel mean and biased variance over all pixels.
pub(crate) fn channel_moments<T: Scalar>(x: &[T], c: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (x.len() / c) as f64;
    let mut mean = vec![0f64; c];
    for px in x.chunks_exact(c) {
        for (a, &v) in mean.iter_mut().zip(px) {
            *a += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|a| *a /= m);
    let mut var = vec![0f64; c];
    for px in x.chunks_exact(c) {
        for ((a, &v), &mu) in var.iter_mut().zip(px).zip(&mean) {
            let dv = v.as_f64() - mu;
            *a += dv * dv;
        }
    }
    var.iter_mut().for_each(|a| *a /= m);
    (mean, var)
}

/// Normalize with the given per-channel statistics, then scale and shift.
/// Returns `(y, x_hat, inv_std)`.
pub(crate) fn batchnorm_apply<T: Scalar>(
    x: &[T],
    c: usize,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for px in x.chunks_exact(c) {
        for ch in 0..c {
            let h = (px[ch] - mean_t[ch]) * inv_std[ch];
            xhat.push(h);
            y.push(gamma[ch] * h + beta[ch]);
        }
    }
    (y, xhat, inv_std)
}

pub(crate) struct BatchNormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

/// Backward of batch normalization. In training mode the batch statistics
/// depend on `x`, which adds the two mean-correction terms.
pub(crate) fn batchnorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    c: usize,
    train: bool,
) -> BatchNormGrads<T> {
    let m = (dy.len() / c) as f64;
    let mut dgamma = vec![0f64; c];
    let mut dbeta = vec![0f64; c];
    for (g, h) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            dgamma[ch] += (g[ch] * h[ch]).as_f64();
            dbeta[ch] += g[ch].as_f64();
        }
    }
    let mut dx = Vec::with_capacity(dy.len());
    if train {
        // dx = γ·inv_std/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
        let coef: Vec<T> = (0..c).map(|ch| gamma[ch] * inv_std[ch]).collect();
        let sum_dy: Vec<T> = dbeta.iter().map(|&v| T::of(v / m)).collect();
        let sum_dyh: Vec<T> = dgamma.iter().map(|&v| T::of(v / m)).collect();
        for (g, h) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
            for ch in 0..c {
                dx.push(coef[ch] * (g[ch] - sum_dy[ch] - h[ch] * sum_dyh[ch]));
            }
        }
    } else {
        for g in dy.chunks_exact(c) {
            for ch in 0..c {
                dx.push(g[ch] * gamma[ch] * inv_std[ch]);
            }
        }
    }
    BatchNormGrads {
        dx,
        dgamma: dgamma.into_iter().map(T::of).collect(),
        dbeta: dbeta.into_iter().map(T::of).collect(),
    }
}
