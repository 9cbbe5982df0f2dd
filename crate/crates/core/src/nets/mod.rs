//! Network definitions and parameter management.

mod codec;
mod generator;
mod mlp;
mod optim;
mod predictor;

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Graph, Tensor, Var};

pub use codec::{Codec, CodecSpec, Decoder, Encoder};
pub use generator::{build_generator, FeatureNorm, StyleGenerator};
pub use mlp::{Activation, Mlp, MlpSpec};
pub use optim::{Adam, AdamConfig};
pub(crate) use optim::DivergenceGuard;
pub use predictor::{PredictorNet, PredictorSpec};

/// Named parameter tensors of one network, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.names.push(name.into());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Adds every tensor to `g`, as leaves when `trainable`, else as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Gradients of the bound leaves, in parameter order.
    pub fn grads(g: &Graph, bound: &[Var]) -> Vec<Tensor> {
        bound.iter().map(|&v| g.grad(v)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (n, t) in self.names.iter().zip(&self.values) {
            c.insert(n.clone(), t.clone());
        }
        c
    }

    /// Overwrites values from `ckpt`; every name must be present with the same shape.
    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (n, slot) in self.names.iter().zip(self.values.iter_mut()) {
            let t = ckpt.require(n)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry `{n}` has shape {:?}, network expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.bit_eq(b))
    }
}

/// A network that persists through the checkpoint container.
pub trait Network: Sized {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn to_checkpoint(&self) -> Checkpoint;
    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self>;
}

pub fn save_checkpoint<N: Network>(net: &N, path: impl AsRef<Path>) -> Result<()> {
    net.to_checkpoint().save(path)
}

pub fn load_checkpoint<N: Network>(path: impl AsRef<Path>) -> Result<N> {
    N::from_checkpoint(&Checkpoint::load(path)?)
}

/// Uniform He-style initialisation: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub(crate) fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Packs a list of small integers (a spec) as a rank-1 tensor.
pub(crate) fn meta_tensor(values: &[usize]) -> Tensor {
    let data: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    if data.is_empty() {
        Tensor::vector(&[-1.0])
    } else {
        Tensor::vector(&data)
    }
}

pub(crate) fn meta_values(ckpt: &Checkpoint, name: &str) -> Result<Vec<usize>> {
    let t = ckpt.require(name)?;
    if t.data() == [-1.0] {
        return Ok(Vec::new());
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Checkpoint(format!("entry `{name}` holds non-integer {v}")))
            }
        })
        .collect()
}

/// A style: per-channel feature mean and (strictly positive) deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector {
    mu: Tensor,
    sigma: Tensor,
}

impl StyleVector {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.shape().len() != 1 || mu.shape() != sigma.shape() {
            return Err(Error::Dimension(format!(
                "style needs two rank-1 tensors of equal length, got {:?} and {:?}",
                mu.shape(),
                sigma.shape()
            )));
        }
        if let Some(bad) = sigma.data().iter().find(|&&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!("style sigma must be positive, got {bad}")));
        }
        if !mu.all_finite() {
            return Err(Error::Domain("style mu must be finite".into()));
        }
        Ok(Self { mu, sigma })
    }

    /// Splits a flattened `[mu | sigma]` vector.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.is_empty() || !flat.len().is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "flattened style must have even length, got {}",
                flat.len()
            )));
        }
        let c = flat.len() / 2;
        Self::new(Tensor::vector(&flat[..c]), Tensor::vector(&flat[c..]))
    }

    pub fn channels(&self) -> usize {
        self.mu.numel()
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn sigma(&self) -> &Tensor {
        &self.sigma
    }

    /// `[mu | sigma]`, length `2C`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.mu.data().to_vec();
        v.extend_from_slice(self.sigma.data());
        v
    }

    /// `[mu | ln sigma]`, the space the style GAN is trained in.
    pub fn to_log_space(&self) -> Vec<f64> {
        let mut v = self.mu.data().to_vec();
        v.extend(self.sigma.data().iter().map(|s| s.ln()));
        v
    }

    pub fn from_log_space(flat: &[f64]) -> Result<Self> {
        let c = flat.len() / 2;
        let mut v = flat.to_vec();
        v[c..].iter_mut().for_each(|x| *x = x.exp());
        Self::from_flat(&v)
    }
}

/// Channel statistics of the encoded image: `{mu(f_E(S)), sigma(f_E(S))}`.
pub fn encode_style(image: &Tensor, encoder: &Encoder) -> Result<StyleVector> {
    let mut g = Graph::new();
    let bound = encoder.params().bind(&mut g, false);
    let x = g.constant(image.clone());
    let feat = encoder.forward(&mut g, &bound, x)?;
    let (mu, sigma) = g.channel_stats(feat)?;
    StyleVector::new(g.value(mu).clone(), g.value(sigma).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn style_vector_rejects_nonpositive_sigma() {
        assert!(StyleVector::new(Tensor::vector(&[0.0]), Tensor::vector(&[0.0])).is_err());
        assert!(StyleVector::new(Tensor::vector(&[0.0, 1.0]), Tensor::vector(&[1.0])).is_err());
        let s = StyleVector::from_flat(&[1.0, 2.0, 0.5, 3.0]).unwrap();
        assert_eq!(s.channels(), 2);
        assert_eq!(s.flatten(), vec![1.0, 2.0, 0.5, 3.0]);
    }

    #[test]
    fn log_space_round_trip() {
        let s = StyleVector::from_flat(&[0.3, -1.0, 0.25, 4.0]).unwrap();
        let back = StyleVector::from_log_space(&s.to_log_space()).unwrap();
        assert!(back.sigma().max_abs_diff(s.sigma()) < 1e-15);
    }

    #[test]
    fn meta_round_trip() {
        let mut c = Checkpoint::new();
        c.insert("a", meta_tensor(&[3, 8, 16]));
        c.insert("e", meta_tensor(&[]));
        assert_eq!(meta_values(&c, "a").unwrap(), vec![3, 8, 16]);
        assert!(meta_values(&c, "e").unwrap().is_empty());
    }
}
