//! One optimizer step on a batch.

use rand::Rng;

use super::{bce_dice_loss, LossValue, UNetModel};
use crate::error::Result;
use crate::tensor::{Adam, AdamConfig, Graph, Mode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: LossValue,
}

/// A model paired with optimizer state for its trainable tensors.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: UNetModel,
    adam: Adam<f32>,
    is_trainable: Vec<bool>,
}

impl Trainer {
    pub fn new(model: UNetModel, config: AdamConfig) -> Self {
        let w = model.weights();
        let adam = Adam::new(config, model.trainable_indices().iter().map(|&i| w.tensor(i).shape()));
        let mut is_trainable = vec![false; w.len()];
        for &i in model.trainable_indices() {
            is_trainable[i] = true;
        }
        Trainer {
            model,
            adam,
            is_trainable,
        }
    }

    pub fn model(&self) -> &UNetModel {
        &self.model
    }

    pub fn into_model(self) -> UNetModel {
        self.model
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.step_count()
    }

    /// Forward in train mode, backward, Adam update and moving-statistics
    /// write-back. The loss is checked for finiteness before any weight
    /// changes.
    pub fn step<R: Rng + ?Sized>(&mut self, images: Tensor<f32>, masks: &Tensor<f32>, rng: &mut R) -> Result<StepOutcome> {
        let mut g = Graph::new();
        let fwd = self.model.forward(&mut g, images, Mode::Train, rng)?;
        let (loss_var, loss) = bce_dice_loss(&mut g, fwd.output, masks)?;
        let mut grads = g.backward(loss_var)?;
        let grads: Vec<Tensor<f32>> = fwd
            .trainable
            .iter()
            .map(|&(_, v)| grads.take(v).expect("parameter gradient"))
            .collect();
        debug_assert!(fwd
            .trainable
            .iter()
            .map(|&(i, _)| i)
            .eq(self.model.trainable_indices().iter().copied()));
        drop(g);

        let weights = self.model.weights_mut();
        let mut params: Vec<&mut Tensor<f32>> = weights
            .tensors_mut()
            .zip(&self.is_trainable)
            .filter_map(|(t, &keep)| keep.then_some(t))
            .collect();
        let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
        self.adam.step(&mut params, &grad_refs)?;
        for (mean_idx, var_idx, stats) in fwd.running {
            *weights.tensor_mut(mean_idx) = stats.mean;
            *weights.tensor_mut(var_idx) = stats.var;
        }
        Ok(StepOutcome { loss })
    }
}
