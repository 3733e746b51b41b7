//! Training loss: mean binary cross-entropy plus soft Dice loss.

use crate::error::{Error, Result};
use crate::tensor::{graph_bce_dice_parts, Graph, Tensor, Var};

/// Smoothing term in the Dice denominator of the training loss.
pub const DICE_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    /// `bce + (1 − dice)`.
    pub total: f64,
    pub bce: f64,
    /// Soft Dice coefficient (not the loss term).
    pub dice: f64,
}

impl LossValue {
    fn new(bce: f64, dice: f64) -> Self {
        LossValue {
            total: bce + (1.0 - dice),
            bce,
            dice,
        }
    }

    pub fn dice_loss(&self) -> f64 {
        1.0 - self.dice
    }
}

/// Records the loss of `pred` against `truth` in `g`.
pub fn bce_dice_loss(g: &mut Graph<f32>, pred: Var, truth: &Tensor<f32>) -> Result<(Var, LossValue)> {
    let (v, bce, dice) = g.bce_dice(pred, truth, DICE_EPSILON)?;
    Ok((v, LossValue::new(bce, dice)))
}

/// The same loss evaluated outside a graph.
pub fn bce_dice_value(pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<LossValue> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("bce_dice", pred.shape(), truth.shape()));
    }
    let (bce, dice) = graph_bce_dice_parts(pred.data(), truth.data(), DICE_EPSILON);
    Ok(LossValue::new(bce, dice))
}
