//! U-Net encoder/decoder with skip connections.

mod checkpoint;
mod loss;
mod plan;
mod train;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use loss::{bce_dice_loss, bce_dice_value, LossValue, DICE_EPSILON};
pub use plan::{build_plan, Layer, LayerKind, LayerPlan, ParamTotals, ENCODER_FILTERS};
pub use train::{StepOutcome, Trainer};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{BatchNormParams, Graph, Mode, RunningStats, Tensor, Var};
use crate::weights::ModelWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    /// Multiplier applied to every hidden filter count; results must be integral.
    pub width_scale: f64,
    /// Encoder dropout per stage, shallow to deep. The decoder mirrors it.
    pub dropout_rates: [f64; 5],
    pub seed: u64,
}

impl Default for UNetConfig {
    /// Full-size network: 192×192×3 in, 3 out, unit width.
    fn default() -> Self {
        UNetConfig {
            input_h: 192,
            input_w: 192,
            input_channels: 3,
            output_channels: 3,
            width_scale: 1.0,
            dropout_rates: [0.1, 0.1, 0.2, 0.2, 0.3],
            seed: 0,
        }
    }
}

impl UNetConfig {
    /// Quarter width at 64×64, sized for CPU runs in minutes.
    pub fn desk() -> Self {
        UNetConfig {
            input_h: 64,
            input_w: 64,
            width_scale: 0.25,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_h == 0 || self.input_w == 0 || self.input_h % 16 != 0 || self.input_w % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {}x{} must be a positive multiple of 16",
                self.input_h, self.input_w
            )));
        }
        if self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return Err(Error::Config(format!(
                "width_scale must be positive, got {}",
                self.width_scale
            )));
        }
        for (a, b) in ENCODER_FILTERS {
            plan::scaled(a, self.width_scale)?;
            plan::scaled(b, self.width_scale)?;
        }
        if let Some(r) = self.dropout_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Config(format!("dropout rate {r} outside [0, 1)")));
        }
        Ok(())
    }
}

/// Output of one forward pass through a recording graph.
pub struct ForwardPass {
    /// Sigmoid probabilities, `N × H × W × output_channels`.
    pub output: Var,
    /// `(weight index, graph variable)` for every trainable tensor.
    pub trainable: Vec<(usize, Var)>,
    /// Updated moving statistics, `(mean index, variance index, stats)`.
    /// Empty in inference mode.
    pub running: Vec<(usize, usize, RunningStats)>,
}

/// A built network: immutable layer plan plus its current weights.
#[derive(Clone, Debug)]
pub struct UNetModel {
    config: UNetConfig,
    plan: Arc<LayerPlan>,
    weights: ModelWeights,
    /// Per layer: indices of its tensors in `weights`.
    slots: Arc<Vec<Vec<usize>>>,
    trainable: Arc<Vec<usize>>,
}

const KERNEL: &str = "kernel";
const BIAS: &str = "bias";

impl UNetModel {
    /// Builds the plan and initializes weights from `config.seed`: Glorot
    /// uniform kernels, zero biases, unit gamma, zero beta, zero moving mean
    /// and unit moving variance.
    pub fn build(config: &UNetConfig) -> Result<Self> {
        let plan = build_plan(config)?;
        let mut rng = rng::stream_at(config.seed, &[0x1417]);
        let mut weights = ModelWeights::new();
        let mut slots = Vec::with_capacity(plan.layers.len());
        let mut trainable = Vec::new();
        for layer in &plan.layers {
            let mut slot = Vec::new();
            let cin = layer.inputs.first().map(|&i| plan.layers[i].output_shape[2]);
            let mut add = |w: &mut ModelWeights, suffix: &str, t: Tensor<f32>, train: bool| -> Result<()> {
                slot.push(w.len());
                if train {
                    trainable.push(w.len());
                }
                w.push(format!("{}/{}", layer.name, suffix), t)
            };
            match layer.kind {
                LayerKind::Conv { kernel, filters, .. } | LayerKind::ConvTranspose { kernel, filters } => {
                    let cin = cin.expect("conv has an input");
                    let shape = [kernel, kernel, cin, filters];
                    let fan = (kernel * kernel * (cin + filters)) as f64;
                    let limit = (6.0 / fan).sqrt() as f32;
                    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                    let k = Tensor::from_fn(shape, |_| dist.sample(&mut rng));
                    add(&mut weights, KERNEL, k, true)?;
                    add(&mut weights, BIAS, Tensor::zeros([filters]), true)?;
                }
                LayerKind::BatchNorm => {
                    let c = layer.output_shape[2];
                    add(&mut weights, "gamma", Tensor::full([c], 1.0), true)?;
                    add(&mut weights, "beta", Tensor::zeros([c]), true)?;
                    add(&mut weights, "moving_mean", Tensor::zeros([c]), false)?;
                    add(&mut weights, "moving_variance", Tensor::full([c], 1.0), false)?;
                }
                _ => {}
            }
            slots.push(slot);
        }
        debug_assert_eq!(weights.numel(), plan.totals().total);
        Ok(UNetModel {
            config: config.clone(),
            plan: Arc::new(plan),
            weights,
            slots: Arc::new(slots),
            trainable: Arc::new(trainable),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn plan(&self) -> &LayerPlan {
        &self.plan
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    /// Indices (into [`Self::weights`]) of the trainable tensors, in order.
    pub fn trainable_indices(&self) -> &[usize] {
        &self.trainable
    }

    /// Replaces the weights after checking names and shapes match the plan.
    pub fn set_weights(&mut self, weights: ModelWeights) -> Result<()> {
        self.weights.check_layout(&weights)?;
        self.weights = weights;
        Ok(())
    }

    pub fn with_weights(&self, weights: ModelWeights) -> Result<Self> {
        let mut m = self.clone();
        m.set_weights(weights)?;
        Ok(m)
    }

    /// Runs the network on `batch` (`N × H × W × C_in`) inside `g`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<f32>,
        batch: Tensor<f32>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let [_, h, w, c] = batch.nhwc()?;
        let want = self.plan.layers[0].output_shape;
        if [h, w, c] != want {
            return Err(Error::shape("unet input", &[h, w, c], &want));
        }
        let mut trainable = Vec::new();
        let mut running = Vec::new();
        let mut outs: Vec<Var> = Vec::with_capacity(self.plan.layers.len());
        let param = |g: &mut Graph<f32>, idx: usize, trainable: &mut Vec<(usize, Var)>| {
            let v = g.param(self.weights.tensor(idx).clone());
            trainable.push((idx, v));
            v
        };
        for (li, layer) in self.plan.layers.iter().enumerate() {
            let slot = &self.slots[li];
            let input = layer.inputs.first().map(|&i| outs[i]);
            let v = match &layer.kind {
                LayerKind::Input => g.input(batch.clone()),
                LayerKind::Conv { relu, .. } => {
                    let k = param(g, slot[0], &mut trainable);
                    let b = param(g, slot[1], &mut trainable);
                    let y = g.conv2d(input.unwrap(), k, b)?;
                    if *relu {
                        g.relu(y)?
                    } else {
                        y
                    }
                }
                LayerKind::ConvTranspose { .. } => {
                    let k = param(g, slot[0], &mut trainable);
                    let b = param(g, slot[1], &mut trainable);
                    g.conv2d_transpose(input.unwrap(), k, b)?
                }
                LayerKind::BatchNorm => {
                    let gamma = param(g, slot[0], &mut trainable);
                    let beta = param(g, slot[1], &mut trainable);
                    let mut stats = RunningStats {
                        mean: self.weights.tensor(slot[2]).clone(),
                        var: self.weights.tensor(slot[3]).clone(),
                    };
                    let y = g.batchnorm(input.unwrap(), gamma, beta, &mut stats, mode, BatchNormParams::default())?;
                    if mode == Mode::Train {
                        running.push((slot[2], slot[3], stats));
                    }
                    y
                }
                LayerKind::Dropout { rate } => g.dropout(input.unwrap(), *rate, mode, rng)?,
                LayerKind::MaxPool => g.maxpool2d(input.unwrap())?,
                LayerKind::Concatenate => {
                    let parts: Vec<Var> = layer.inputs.iter().map(|&i| outs[i]).collect();
                    g.concat_channels(&parts)?
                }
                LayerKind::Add => g.add(outs[layer.inputs[0]], outs[layer.inputs[1]])?,
            };
            outs.push(v);
        }
        let output = g.sigmoid(*outs.last().unwrap())?;
        Ok(ForwardPass {
            output,
            trainable,
            running,
        })
    }

    /// Inference-mode probabilities for `images` (`N × H × W × C_in`),
    /// evaluated `batch_size` samples at a time.
    pub fn predict(&self, images: &Tensor<f32>, batch_size: usize) -> Result<Tensor<f32>> {
        let [n, h, w, c] = images.nhwc()?;
        let per = h * w * c;
        let out_c = self.config.output_channels;
        let mut out = Vec::with_capacity(n * h * w * out_c);
        let mut rng = rng::stream(0);
        for start in (0..n).step_by(batch_size.max(1)) {
            let m = batch_size.max(1).min(n - start);
            let chunk = Tensor::new([m, h, w, c], images.data()[start * per..(start + m) * per].to_vec())?;
            let mut g = Graph::inference();
            let fwd = self.forward(&mut g, chunk, Mode::Infer, &mut rng)?;
            out.extend_from_slice(g.value(fwd.output).data());
        }
        Tensor::new([n, h, w, out_c], out)
    }
}
