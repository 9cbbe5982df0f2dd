use rand::Rng;

use super::{meta_tensor, meta_values, Mlp, MlpSpec, Network, ParamSet, StyleVector};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Graph, Tensor, Var};

/// Feature-wise affine normalisation `y = (x - mean) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Style generator `G`: an MLP from latent `z` to a normalised `[mu | ln sigma]`
/// vector, followed by de-normalisation and an exponential on the sigma half.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleGenerator {
    mlp: Mlp,
    channels: usize,
    norm: FeatureNorm,
}

/// Builds `G` for `C` feature channels. The spec's final width must be `2C`.
pub fn build_generator<R: Rng + ?Sized>(
    spec: MlpSpec,
    z_dim: usize,
    channels: usize,
    rng: &mut R,
) -> Result<StyleGenerator> {
    if channels == 0 || spec.out_dim() != 2 * channels {
        return Err(Error::Config(format!(
            "generator output width {} must equal 2C = {}",
            spec.out_dim(),
            2 * channels
        )));
    }
    Ok(StyleGenerator {
        mlp: Mlp::new(z_dim, spec, rng)?,
        channels,
        norm: FeatureNorm::identity(2 * channels),
    })
}

impl StyleGenerator {
    pub fn from_parts(mlp: Mlp, channels: usize, norm: FeatureNorm) -> Result<Self> {
        if mlp.out_dim() != 2 * channels || norm.dim() != 2 * channels {
            return Err(Error::Config(format!(
                "generator parts disagree: mlp out {}, norm dim {}, 2C = {}",
                mlp.out_dim(),
                norm.dim(),
                2 * channels
            )));
        }
        Ok(Self { mlp, channels, norm })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn z_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn norm(&self) -> &FeatureNorm {
        &self.norm
    }

    pub fn set_norm(&mut self, norm: FeatureNorm) -> Result<()> {
        if norm.dim() != 2 * self.channels {
            return Err(Error::Dimension(format!(
                "normalisation has {} features, generator emits {}",
                norm.dim(),
                2 * self.channels
            )));
        }
        self.norm = norm;
        Ok(())
    }

    /// Style statistics as graph nodes, each `[B, C]`.
    pub fn style_graph(&self, g: &mut Graph, bound: &[Var], z: Var) -> Result<(Var, Var)> {
        let raw = self.mlp.forward(g, bound, z)?;
        let dim = 2 * self.channels;
        let scale = g.constant(Tensor::new(&[dim], self.norm.scale.clone())?);
        let mean = g.constant(Tensor::new(&[dim], self.norm.mean.clone())?);
        let scaled = g.mul(raw, scale)?;
        let s = g.add(scaled, mean)?;
        let mu = g.slice_last(s, 0, self.channels)?;
        let log_sigma = g.slice_last(s, self.channels, dim)?;
        let sigma = g.exp(log_sigma);
        Ok((mu, sigma))
    }

    pub fn generate(&self, z: &Tensor) -> Result<StyleVector> {
        let mut g = Graph::new();
        let bound = self.mlp.params().bind(&mut g, false);
        let zv = g.constant(z.clone());
        let (mu, sigma) = self.style_graph(&mut g, &bound, zv)?;
        if g.value(mu).shape()[0] != 1 {
            return Err(Error::Dimension("generate takes a single latent".into()));
        }
        StyleVector::new(
            g.value(mu).reshape(&[self.channels])?,
            g.value(sigma).reshape(&[self.channels])?,
        )
    }
}

impl Network for StyleGenerator {
    fn params(&self) -> &ParamSet {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        self.mlp.params_mut()
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.extend_prefixed("mlp.", &self.mlp.to_checkpoint());
        c.insert("meta.channels", meta_tensor(&[self.channels]));
        c.insert("norm.mean", Tensor::vector(&self.norm.mean));
        c.insert("norm.scale", Tensor::vector(&self.norm.scale));
        c
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mlp = Mlp::from_checkpoint(&ckpt.with_prefix("mlp."))?;
        let channels = *meta_values(ckpt, "meta.channels")?
            .first()
            .ok_or_else(|| Error::Checkpoint("empty meta.channels".into()))?;
        let norm = FeatureNorm {
            mean: ckpt.require("norm.mean")?.data().to_vec(),
            scale: ckpt.require("norm.scale")?.data().to_vec(),
        };
        Self::from_parts(mlp, channels, norm).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_final_layer_gives_unit_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut gen = build_generator(MlpSpec::generator(32), 64, 16, &mut rng).unwrap();
        gen.mlp_mut().zero_last_layer();
        let s = gen.generate(&Tensor::zeros(&[64])).unwrap();
        assert!(s.mu().data().iter().all(|&m| m == 0.0));
        assert!(s.sigma().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            build_generator(MlpSpec::generator(30), 64, 16, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn output_is_always_2c_and_sigma_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gen = build_generator(MlpSpec::generator(8), 6, 4, &mut rng).unwrap();
        for _ in 0..10_000 {
            let z = Tensor::randn(&[6], &mut rng).map(|v| 3.0 * v);
            let s = gen.generate(&z).unwrap();
            assert_eq!(s.flatten().len(), 8);
            assert!(s.sigma().data().iter().all(|&v| v > 0.0));
        }
    }
}
