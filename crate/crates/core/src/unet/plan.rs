//! Layer plan: the network as an ordered list of named layers with their
//! output shapes and parameter counts.

use std::collections::HashMap;

use serde::Serialize;

use super::UNetConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv { kernel: usize, filters: usize, relu: bool },
    BatchNorm,
    Dropout { rate: f64 },
    MaxPool,
    ConvTranspose { kernel: usize, filters: usize },
    Concatenate,
    Add,
}

impl LayerKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            LayerKind::Input => "InputLayer",
            LayerKind::Conv { .. } => "Conv2D",
            LayerKind::BatchNorm => "BatchNormalization",
            LayerKind::Dropout { .. } => "Dropout",
            LayerKind::MaxPool => "MaxPooling2D",
            LayerKind::ConvTranspose { .. } => "Conv2DTranspose",
            LayerKind::Concatenate => "Concatenate",
            LayerKind::Add => "Add",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Indices of the layers feeding this one.
    pub inputs: Vec<usize>,
    /// `(h, w, c)` without the batch axis.
    pub output_shape: [usize; 3],
    pub params: usize,
    pub trainable_params: usize,
}

impl Layer {
    pub fn non_trainable_params(&self) -> usize {
        self.params - self.trainable_params
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerPlan {
    pub layers: Vec<Layer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamTotals {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

impl LayerPlan {
    pub fn totals(&self) -> ParamTotals {
        let total = self.layers.iter().map(|l| l.params).sum();
        let trainable = self.layers.iter().map(|l| l.trainable_params).sum();
        ParamTotals {
            total,
            trainable,
            non_trainable: total - trainable,
        }
    }

    pub fn output(&self) -> &Layer {
        self.layers.last().expect("plan has an input layer")
    }
}

/// Assigns Keras-style names (`conv2d`, `conv2d_1`, …) and infers shapes.
struct Builder {
    layers: Vec<Layer>,
    counters: HashMap<&'static str, usize>,
}

impl Builder {
    fn name(&mut self, base: &'static str) -> String {
        // The reference summary numbers residual adds from 1.
        let start = usize::from(base == "add");
        let n = self.counters.entry(base).or_insert(start);
        let name = if *n == 0 {
            base.to_string()
        } else {
            format!("{base}_{n}")
        };
        *n += 1;
        name
    }

    fn shape(&self, i: usize) -> [usize; 3] {
        self.layers[i].output_shape
    }

    fn push(&mut self, base: &'static str, kind: LayerKind, inputs: Vec<usize>) -> Result<usize> {
        let [h, w, c] = self.shape(inputs[0]);
        let (output_shape, params, trainable) = match &kind {
            LayerKind::Input => unreachable!("input is pushed directly"),
            LayerKind::Conv { kernel, filters, .. } => {
                let p = filters * (kernel * kernel * c + 1);
                ([h, w, *filters], p, p)
            }
            LayerKind::BatchNorm => ([h, w, c], 4 * c, 2 * c),
            LayerKind::Dropout { .. } => ([h, w, c], 0, 0),
            LayerKind::MaxPool => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape("max pooling plan", &[h, w, c], &[h / 2 * 2, w / 2 * 2, c]));
                }
                ([h / 2, w / 2, c], 0, 0)
            }
            LayerKind::ConvTranspose { kernel, filters } => {
                let p = filters * (kernel * kernel * c + 1);
                ([h * kernel, w * kernel, *filters], p, p)
            }
            LayerKind::Concatenate => {
                let mut total = 0;
                for &i in &inputs {
                    let [hi, wi, ci] = self.shape(i);
                    if (hi, wi) != (h, w) {
                        return Err(Error::shape("concatenate plan", &[h, w, c], &[hi, wi, ci]));
                    }
                    total += ci;
                }
                ([h, w, total], 0, 0)
            }
            LayerKind::Add => {
                for &i in &inputs {
                    if self.shape(i) != [h, w, c] {
                        return Err(Error::shape("add plan", &[h, w, c], &self.shape(i)));
                    }
                }
                ([h, w, c], 0, 0)
            }
        };
        let name = self.name(base);
        self.layers.push(Layer {
            name,
            kind,
            inputs,
            output_shape,
            params,
            trainable_params: trainable,
        });
        Ok(self.layers.len() - 1)
    }

    fn conv(&mut self, input: usize, filters: usize, relu: bool) -> Result<usize> {
        self.push(
            "conv2d",
            LayerKind::Conv {
                kernel: 3,
                filters,
                relu,
            },
            vec![input],
        )
    }

    fn bn(&mut self, input: usize) -> Result<usize> {
        self.push("batch_normalization", LayerKind::BatchNorm, vec![input])
    }

    fn dropout(&mut self, input: usize, rate: f64) -> Result<usize> {
        self.push("dropout", LayerKind::Dropout { rate }, vec![input])
    }
}

/// Filter counts of the five encoder stages at unit width.
pub const ENCODER_FILTERS: [(usize, usize); 5] = [(32, 16), (64, 32), (128, 64), (256, 128), (512, 256)];

pub(crate) fn scaled(filters: usize, scale: f64) -> Result<usize> {
    let v = filters as f64 * scale;
    let r = v.round();
    if (v - r).abs() > 1e-9 || r < 1.0 {
        return Err(Error::Config(format!(
            "width_scale {scale} turns {filters} filters into non-integral or empty count {v}"
        )));
    }
    Ok(r as usize)
}

/// Builds the layer plan for `config`.
///
/// Encoder: five stages of conv → conv → batch norm → dropout, the first four
/// followed by a 2×2 max pool (stage two places dropout before batch norm).
/// Decoder: four stages that upsample with a 2×2 stride-2 transposed conv and
/// concatenate the matching encoder output. The first decoder stage is
/// conv → conv → batch norm → dropout; the others are conv → batch norm →
/// dropout → conv → batch norm followed by a residual add from the
/// concatenation. A 1×1 conv maps to the output channels.
pub fn build_plan(config: &UNetConfig) -> Result<LayerPlan> {
    config.validate()?;
    let s = config.width_scale;
    let mut b = Builder {
        layers: vec![Layer {
            name: "img".into(),
            kind: LayerKind::Input,
            inputs: vec![],
            output_shape: [config.input_h, config.input_w, config.input_channels],
            params: 0,
            trainable_params: 0,
        }],
        counters: HashMap::new(),
    };
    let rates = config.dropout_rates;

    let mut x = 0;
    let mut skips = Vec::new();
    for (stage, &(f1, f2)) in ENCODER_FILTERS.iter().enumerate() {
        x = b.conv(x, scaled(f1, s)?, true)?;
        x = b.conv(x, scaled(f2, s)?, true)?;
        if stage == 1 {
            x = b.dropout(x, rates[stage])?;
            x = b.bn(x)?;
        } else {
            x = b.bn(x)?;
            x = b.dropout(x, rates[stage])?;
        }
        if stage < ENCODER_FILTERS.len() - 1 {
            skips.push(x);
            x = b.push("max_pooling2d", LayerKind::MaxPool, vec![x])?;
        }
    }

    for (stage, skip) in skips.into_iter().rev().enumerate() {
        let skip_c = b.shape(skip)[2];
        // Mirrored dropout schedule: deepest rate first.
        let rate = rates[rates.len() - 1 - stage];
        x = b.push(
            "conv2d_transpose",
            LayerKind::ConvTranspose {
                kernel: 2,
                filters: skip_c,
            },
            vec![x],
        )?;
        let cat = b.push("concatenate", LayerKind::Concatenate, vec![x, skip])?;
        let width = b.shape(cat)[2];
        if stage == 0 {
            x = b.conv(cat, width, true)?;
            x = b.conv(x, width, false)?;
            x = b.bn(x)?;
            x = b.dropout(x, rate)?;
        } else {
            x = b.conv(cat, width, true)?;
            x = b.bn(x)?;
            x = b.dropout(x, rate)?;
            x = b.conv(x, width, false)?;
            x = b.bn(x)?;
            x = b.push("add", LayerKind::Add, vec![cat, x])?;
        }
    }

    b.push(
        "conv2d",
        LayerKind::Conv {
            kernel: 1,
            filters: config.output_channels,
            relu: false,
        },
        vec![x],
    )?;
    Ok(LayerPlan { layers: b.layers })
}
