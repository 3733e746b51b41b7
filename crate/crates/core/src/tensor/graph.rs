use rand::Rng;

use super::kernels::{self, Dims};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch-norm moving statistics, each of extent `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros([channels]),
            var: Tensor::full([channels], T::one()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormParams {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormParams {
    fn default() -> Self {
        BatchNormParams {
            eps: 1e-5,
            momentum: 0.9,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        cols: Vec<T>,
        dims: Dims,
        kh: usize,
        kw: usize,
    },
    ConvTranspose {
        x: Var,
        k: Var,
        b: Var,
        dims: Dims,
        stride: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout {
        x: Var,
        scale: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Sum(Var),
    BceDice {
        pred: Var,
        truth: Vec<T>,
        eps: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed operations.
///
/// Nodes are appended in execution order, which is a topological order, so
/// the backward pass is a single reverse sweep.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const BCE_CLAMP: f64 = 1e-7;

impl<T: Scalar> Graph<T> {
    /// A recording graph: parameters receive gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A forward-only graph. Intermediate buffers needed for backward are
    /// dropped as soon as each op finishes.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// A constant leaf (never differentiated).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let rg = self.record;
        self.push(t, Op::Leaf, rg)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn checked(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<Var> {
        value.ensure_finite(op_name)?;
        Ok(self.push(value, op, rg))
    }

    /// Same-padded, stride-1 convolution. `kernel` is `kh × kw × c_in × c_out`,
    /// `bias` is `c_out`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).nhwc()?;
        let ks = self.value(kernel).shape().to_vec();
        let [n, h, w, c] = xs;
        let (kh, kw, c_out) = match ks[..] {
            [kh, kw, ci, co] if ci == c => (kh, kw, co),
            _ => return Err(Error::shape("conv2d", &xs, &ks)),
        };
        if self.value(bias).shape() != [c_out] {
            return Err(Error::shape("conv2d bias", self.value(bias).shape(), &[c_out]));
        }
        let dims = Dims { n, h, w, c };
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            dims,
            self.value(kernel).data(),
            kh,
            kw,
            c_out,
            self.value(bias).data(),
        );
        let value = Tensor::new([n, h, w, c_out], out)?;
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        let cols = if rg { cols } else { Vec::new() };
        self.checked(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                k: kernel,
                b: bias,
                cols,
                dims,
                kh,
                kw,
            },
            rg,
        )
    }

    /// Transposed convolution with stride equal to the square kernel extent.
    /// `kernel` is `s × s × c_in × c_out`; spatial extents grow by `s`.
    pub fn conv2d_transpose(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).nhwc()?;
        let ks = self.value(kernel).shape().to_vec();
        let [n, h, w, c] = xs;
        let (s, c_out) = match ks[..] {
            [kh, kw, ci, co] if kh == kw && ci == c => (kh, co),
            _ => return Err(Error::shape("conv2d_transpose", &xs, &ks)),
        };
        if self.value(bias).shape() != [c_out] {
            return Err(Error::shape(
                "conv2d_transpose bias",
                self.value(bias).shape(),
                &[c_out],
            ));
        }
        let dims = Dims { n, h, w, c };
        let out = kernels::conv_transpose_forward(
            self.value(x).data(),
            dims,
            self.value(kernel).data(),
            s,
            c_out,
            self.value(bias).data(),
        );
        let value = Tensor::new([n, h * s, w * s, c_out], out)?;
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        self.checked(
            "conv2d_transpose",
            value,
            Op::ConvTranspose {
                x,
                k: kernel,
                b: bias,
                dims,
                stride: s,
            },
            rg,
        )
    }

    /// 2×2 max pool, stride 2.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let [n, h, w, c] = self.value(x).nhwc()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2d", &[n, h, w, c], &[n, h / 2 * 2, w / 2 * 2, c]));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), Dims { n, h, w, c });
        let value = Tensor::new([n, h / 2, w / 2, c], out)?;
        let rg = self.rg(x);
        self.checked("maxpool2d", value, Op::MaxPool { x, argmax }, rg)
    }

    /// Batch normalization over N, H, W per channel.
    ///
    /// In [`Mode::Train`] the batch statistics normalize the input and are
    /// folded into `stats` with the configured momentum; in [`Mode::Infer`]
    /// `stats` is used as-is.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
        params: BatchNormParams,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("batchnorm", &shape, &[]))?;
        for t in [
            self.value(gamma),
            self.value(beta),
            &stats.mean,
            &stats.var,
        ] {
            if t.shape() != [c] {
                return Err(Error::shape("batchnorm", t.shape(), &[c]));
            }
        }
        let xd = self.value(x).data();
        if xd.len() / c == 0 {
            return Err(Error::Config("batchnorm over an empty batch".into()));
        }
        let train = mode == Mode::Train;
        let (mean, var) = if train {
            let (mean, var) = kernels::channel_moments(xd, c);
            let mom = params.momentum;
            for ch in 0..c {
                let rm = stats.mean.data()[ch].as_f64();
                let rv = stats.var.data()[ch].as_f64();
                stats.mean.data_mut()[ch] = T::of(mom * rm + (1.0 - mom) * mean[ch]);
                stats.var.data_mut()[ch] = T::of(mom * rv + (1.0 - mom) * var[ch]);
            }
            (mean, var)
        } else {
            (
                stats.mean.data().iter().map(|v| v.as_f64()).collect(),
                stats.var.data().iter().map(|v| v.as_f64().max(0.0)).collect(),
            )
        };
        let (y, xhat, inv_std) = kernels::batchnorm_apply(
            xd,
            c,
            &mean,
            &var,
            params.eps,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(shape, y)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { Default::default() };
        self.checked(
            "batchnorm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        )
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let scale: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&scale).map(|(&a, &s)| a * s).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.checked("dropout", value, Op::Dropout { x, scale }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.checked("relu", value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.rg(x);
        self.checked("sigmoid", value, Op::Sigmoid(x), rg)
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.checked("add", value, Op::Add(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.checked("mul", value, Op::Mul(a, b), rg)
    }

    /// Stack along the last (channel) axis; all leading extents must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.value(*first).shape(), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let pixels: usize = lead.iter().product();
        let mut data = Vec::with_capacity(pixels * total);
        for px in 0..pixels {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[px * w..(px + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.checked("concat", value, Op::Concat(parts.to_vec()), rg)
    }

    /// Sum of all elements, as a rank-1 tensor of extent 1.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.checked("sum", value, Op::Sum(x), rg)
    }

    /// Mean binary cross-entropy plus soft Dice loss, `bce + (1 − dice)`.
    ///
    /// Predictions are clamped to `[1e-7, 1 − 1e-7]` inside the logarithms
    /// only; the clamp has zero gradient outside that band. Dice uses raw
    /// predictions with smoothing `eps` in the denominator. Returns the loss
    /// node and its two addends.
    pub fn bce_dice(&mut self, pred: Var, truth: &Tensor<T>, eps: f64) -> Result<(Var, f64, f64)> {
        let p = self.value(pred);
        if p.shape() != truth.shape() {
            return Err(Error::shape("bce_dice", p.shape(), truth.shape()));
        }
        let (bce, dice) = bce_dice_parts(p.data(), truth.data(), eps);
        let loss = bce + (1.0 - dice);
        let rg = self.rg(pred);
        let truth = if rg { truth.data().to_vec() } else { Vec::new() };
        let v = self.checked(
            "bce_dice",
            Tensor::scalar(T::of(loss)),
            Op::BceDice { pred, truth, eps },
            rg,
        )?;
        Ok((v, bce, dice))
    }

    /// Reverse sweep from a scalar `loss`. Every differentiable leaf gets a
    /// gradient; leaves that do not influence the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.value(loss).shape();
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss { shape: ls.to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(ls.to_vec(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            g.ensure_finite("backward")?;
            self.backprop(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) -> Result<()> {
        if self.rg(v) {
            let t = Tensor::new(self.value(v).shape().to_vec(), data)?;
            self.accumulate(grads, v, t);
        }
        Ok(())
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                k,
                b,
                cols,
                dims,
                kh,
                kw,
            } => {
                let c_out = *node.value.shape().last().unwrap();
                let cg = kernels::conv2d_backward(
                    gd,
                    cols,
                    *dims,
                    self.value(*k).data(),
                    *kh,
                    *kw,
                    c_out,
                    self.rg(*x),
                );
                self.accumulate_vec(grads, *k, cg.dk)?;
                self.accumulate_vec(grads, *b, cg.db)?;
                if let Some(dx) = cg.dx {
                    self.accumulate_vec(grads, *x, dx)?;
                }
            }
            Op::ConvTranspose { x, k, b, dims, stride } => {
                let c_out = *node.value.shape().last().unwrap();
                let cg = kernels::conv_transpose_backward(
                    gd,
                    self.value(*x).data(),
                    *dims,
                    self.value(*k).data(),
                    *stride,
                    c_out,
                    self.rg(*x),
                );
                self.accumulate_vec(grads, *k, cg.dk)?;
                self.accumulate_vec(grads, *b, cg.db)?;
                if let Some(dx) = cg.dx {
                    self.accumulate_vec(grads, *x, dx)?;
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let bg = kernels::batchnorm_backward(
                    gd,
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    c,
                    *train,
                );
                self.accumulate_vec(grads, *x, bg.dx)?;
                self.accumulate_vec(grads, *gamma, bg.dgamma)?;
                self.accumulate_vec(grads, *beta, bg.dbeta)?;
            }
            Op::Dropout { x, scale } => {
                let dx = gd.iter().zip(scale).map(|(&a, &s)| a * s).collect();
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::Relu(x) => {
                let dx = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&a, &y)| if y > T::zero() { a } else { T::zero() })
                    .collect();
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::Sigmoid(x) => {
                let dx = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&a, &y)| a * y * (T::one() - y))
                    .collect();
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let da = gd.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                let db = gd.iter().zip(va).map(|(&x, &y)| x * y).collect();
                self.accumulate_vec(grads, *a, da)?;
                self.accumulate_vec(grads, *b, db)?;
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.value(p).shape().last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let pixels = gd.len() / total;
                let mut bufs: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(w * pixels)).collect();
                for px in gd.chunks_exact(total) {
                    let mut off = 0;
                    for (buf, &w) in bufs.iter_mut().zip(&widths) {
                        buf.extend_from_slice(&px[off..off + w]);
                        off += w;
                    }
                }
                for (&p, buf) in parts.iter().zip(bufs) {
                    self.accumulate_vec(grads, p, buf)?;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate_vec(grads, *x, vec![gd[0]; n])?;
            }
            Op::BceDice { pred, truth, eps } => {
                let p = self.value(*pred).data();
                let dx = bce_dice_grad(p, truth, *eps, gd[0].as_f64());
                self.accumulate_vec(grads, *pred, dx)?;
            }
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// `(mean bce, soft dice)` of raw predictions against truth.
pub(crate) fn bce_dice_parts<T: Scalar>(pred: &[T], truth: &[T], eps: f64) -> (f64, f64) {
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut sum = 0.0;
    for (&p, &y) in pred.iter().zip(truth) {
        let (p, y) = (p.as_f64(), y.as_f64());
        let pc = clamp_prob(p);
        bce -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        inter += y * p;
        sum += y + p;
    }
    let n = pred.len() as f64;
    (bce / n, 2.0 * inter / (sum + eps))
}

fn bce_dice_grad<T: Scalar>(pred: &[T], truth: &[T], eps: f64, upstream: f64) -> Vec<T> {
    let n = pred.len() as f64;
    let mut inter = 0.0;
    let mut sum = 0.0;
    for (&p, &y) in pred.iter().zip(truth) {
        inter += y.as_f64() * p.as_f64();
        sum += y.as_f64() + p.as_f64();
    }
    let denom = sum + eps;
    pred.iter()
        .zip(truth)
        .map(|(&p, &y)| {
            let (p, y) = (p.as_f64(), y.as_f64());
            let d_bce = if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                (-y / p + (1.0 - y) / (1.0 - p)) / n
            } else {
                0.0
            };
            let d_dice = 2.0 * y / denom - 2.0 * inter / (denom * denom);
            T::of(upstream * (d_bce - d_dice))
        })
        .collect()
}
