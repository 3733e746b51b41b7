//! Ordered, named collections of `f32` tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named tensors in a fixed order. This is the unit broadcast to clients,
/// returned as deltas, aggregated and checkpointed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelWeights {
    entries: Vec<(String, Tensor<f32>)>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Config(format!("duplicate tensor name {name:?}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor<f32> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f32> {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Errors unless `other` has exactly the same names, order and shapes.
    pub fn check_layout(&self, other: &ModelWeights) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape("weights layout", &[self.len()], &[other.len()]));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::Config(format!(
                    "weights layout: tensor {na:?} vs {nb:?}"
                )));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::shape("weights layout", ta.shape(), tb.shape()));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ModelWeights {
        ModelWeights {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    /// `self − other`, elementwise.
    pub fn sub(&self, other: &ModelWeights) -> Result<ModelWeights> {
        self.check_layout(other)?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &ModelWeights) -> Result<()> {
        self.check_layout(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ModelWeights {
        ModelWeights {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.map(&f)))
                .collect(),
        }
    }

    fn zip_map(&self, other: &ModelWeights, f: impl Fn(f32, f32) -> f32) -> ModelWeights {
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((n, a), (_, b))| {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                (n.clone(), Tensor::new(a.shape().to_vec(), data).expect("same layout"))
            })
            .collect();
        ModelWeights { entries }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelWeights {
        let mut w = ModelWeights::new();
        w.push("a", Tensor::from_fn([2], |i| i as f32)).unwrap();
        w.push("b", Tensor::from_fn([2, 2], |i| 1.0 + i as f32)).unwrap();
        w
    }

    #[test]
    fn rejects_duplicate_names() {
        let mut w = sample();
        assert!(w.push("a", Tensor::zeros([1])).is_err());
    }

    #[test]
    fn sub_then_add_restores() {
        let a = sample();
        let b = a.map(|v| v * 2.0);
        let mut d = b.sub(&a).unwrap();
        d.add_assign(&a).unwrap();
        assert_eq!(d, b);
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let a = sample();
        let mut b = ModelWeights::new();
        b.push("a", Tensor::zeros([2])).unwrap();
        b.push("b", Tensor::zeros([4])).unwrap();
        assert!(a.check_layout(&b).is_err());
        assert!(a.sub(&b).is_err());
    }
}
