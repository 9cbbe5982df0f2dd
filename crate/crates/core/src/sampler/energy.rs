use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attribute::{NormalizationSpec, Predictor};
use crate::error::{Error, Result};
use crate::nets::{Network, StyleGenerator};
use crate::styletx::{ContentFeatures, Stylizer};
use crate::tensor::{Graph, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A log-density (up to a constant) over `R^d`, the quantity every chain
/// climbs and samples.
pub trait Energy {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.value_grad(x)?.0)
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Chain starting point; `N(0, I)` unless overridden.
    fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64>
    where
        Self: Sized,
    {
        (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect()
    }
}

fn check_dim(expect: usize, x: &[f64]) -> Result<()> {
    if x.len() != expect {
        return Err(Error::Dimension(format!(
            "energy over R^{expect} evaluated at a point of length {}",
            x.len()
        )));
    }
    Ok(())
}

/// Zero-mean Gaussian `-x^T P x / 2` with precision matrix `P` (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEnergy {
    dim: usize,
    precision: Vec<f64>,
}

impl GaussianEnergy {
    pub fn standard(dim: usize) -> Self {
        let mut precision = vec![0.0; dim * dim];
        (0..dim).for_each(|i| precision[i * dim + i] = 1.0);
        Self { dim, precision }
    }

    /// Unit-variance 2-D Gaussian with correlation `rho`.
    pub fn correlated_2d(rho: f64) -> Self {
        let det = 1.0 - rho * rho;
        Self {
            dim: 2,
            precision: vec![1.0 / det, -rho / det, -rho / det, 1.0 / det],
        }
    }
}

impl Energy for GaussianEnergy {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(self.dim, x)?;
        let px: Vec<f64> = self
            .precision
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(x).map(|(p, v)| p * v).sum())
            .collect();
        let q: f64 = px.iter().zip(x).map(|(a, b)| a * b).sum();
        Ok((-0.5 * q, px.into_iter().map(|v| -v).collect()))
    }
}

/// `O = 0` everywhere.
#[derive(Clone, Copy, Debug)]
pub struct FlatEnergy(pub usize);

impl Energy for FlatEnergy {
    fn dim(&self) -> usize {
        self.0
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(self.0, x)?;
        Ok((0.0, vec![0.0; self.0]))
    }
}

/// Energy from a closure returning value and gradient.
pub struct FnEnergy<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> FnEnergy<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> Energy for FnEnergy<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(self.dim, x)?;
        Ok((self.f)(x))
    }
}

/// How the stylization strength enters the energy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum AlphaPolicy {
    /// Constant `alpha` in `[0, 1]`; the state is `z` alone.
    Fixed { alpha: f64 },
    /// `alpha` is the last state coordinate, clipped to `[0, 1]` before
    /// stylizing and given a Gaussian prior.
    Sampled { prior_mean: f64, prior_std: f64 },
}

impl AlphaPolicy {
    pub fn adaptive() -> Self {
        AlphaPolicy::Sampled {
            prior_mean: 0.5,
            prior_std: 0.5,
        }
    }

    pub fn is_sampled(&self) -> bool {
        matches!(self, AlphaPolicy::Sampled { .. })
    }
}

/// `clip(alpha) = min(1, max(0, alpha))`.
pub fn clip_alpha(alpha: f64) -> f64 {
    alpha.clamp(0.0, 1.0)
}

/// Models an energy needs; all frozen.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub generator: &'a StyleGenerator,
    pub stylizer: &'a Stylizer,
    pub predictor: &'a Predictor,
}

/// `O(z) = log P_A(Z(I, G(z))) + log N(z; 0, I)`, or with a sampled
/// strength `O(z, a) = log P_A(Z^(I, G(z), clip(a))) + log N(z; 0, I) + log N(a; m, s^2)`.
pub struct StyleEnergy<'a> {
    content: &'a ContentFeatures,
    models: Models<'a>,
    spec: NormalizationSpec,
    alpha: AlphaPolicy,
}

/// Value and graph nodes of one evaluation.
struct Built {
    graph: Graph,
    total: Var,
    z: Var,
    alpha: Option<Var>,
}

impl<'a> StyleEnergy<'a> {
    pub fn new(
        content: &'a ContentFeatures,
        models: Models<'a>,
        spec: NormalizationSpec,
        alpha: AlphaPolicy,
    ) -> Result<Self> {
        spec.validate()?;
        match alpha {
            AlphaPolicy::Fixed { alpha } if !(0.0..=1.0).contains(&alpha) => {
                return Err(Error::Config(format!("fixed alpha must lie in [0, 1], got {alpha}")))
            }
            AlphaPolicy::Sampled { prior_std, .. } if !(prior_std > 0.0) => {
                return Err(Error::Config("alpha prior deviation must be positive".into()))
            }
            _ => {}
        }
        Ok(Self {
            content,
            models,
            spec,
            alpha,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.models.generator.z_dim()
    }

    pub fn alpha_policy(&self) -> AlphaPolicy {
        self.alpha
    }

    /// Strength used for stylizing at state `x`.
    pub fn alpha_of(&self, x: &[f64]) -> f64 {
        match self.alpha {
            AlphaPolicy::Fixed { alpha } => alpha,
            AlphaPolicy::Sampled { .. } => clip_alpha(x[self.z_dim()]),
        }
    }

    fn stage_check(g: &Graph, v: Var, stage: &'static str) -> Result<()> {
        if g.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::Energy {
                stage,
                detail: "non-finite values".into(),
            })
        }
    }

    fn build(&self, x: &[f64], track: bool) -> Result<Built> {
        check_dim(self.dim(), x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Energy {
                stage: "input",
                detail: "non-finite state".into(),
            });
        }
        let zd = self.z_dim();
        let mut g = Graph::new();
        let input = |g: &mut Graph, t: Tensor| if track { g.leaf(t) } else { g.constant(t) };
        let z = input(&mut g, Tensor::vector(&x[..zd]));

        let gen = self.models.generator;
        let gb = gen.mlp().params().bind(&mut g, false);
        let (mu, sigma) = gen.style_graph(&mut g, &gb, z)?;
        Self::stage_check(&g, sigma, "generator")?;
        Self::stage_check(&g, mu, "generator")?;
        let c = gen.channels();
        let mu = g.reshape(mu, &[c])?;
        let sigma = g.reshape(sigma, &[c])?;

        let features = g.constant(self.content.features.clone());
        let (alpha_leaf, alpha_var) = match self.alpha {
            AlphaPolicy::Fixed { alpha } => (None, g.constant(Tensor::scalar(alpha))),
            AlphaPolicy::Sampled { .. } => {
                let a = input(&mut g, Tensor::scalar(x[zd]));
                (Some(a), g.clamp(a, 0.0, 1.0))
            }
        };
        let image = self
            .models
            .stylizer
            .stylize_graph(&mut g, features, mu, sigma, Some(alpha_var))?;
        Self::stage_check(&g, image, "stylizer")?;

        let pred = self.models.predictor;
        let pb = pred.net().params().bind(&mut g, false);
        let log_pa = pred.log_score_graph(&mut g, &pb, image, &self.spec)?;
        let log_pa = g.sum(log_pa);
        Self::stage_check(&g, log_pa, "predictor")?;

        let zsq = g.square(z);
        let zsq = g.sum(zsq);
        let zsq = g.scale(zsq, -0.5);
        let mut total = g.offset(zsq, -0.5 * zd as f64 * LN_2PI);
        total = g.add(total, log_pa)?;
        if let (Some(a), AlphaPolicy::Sampled { prior_mean, prior_std }) = (alpha_leaf, self.alpha) {
            let var = prior_std * prior_std;
            let d = g.offset(a, -prior_mean);
            let d2 = g.square(d);
            let lp = g.scale(d2, -0.5 / var);
            let lp = g.offset(lp, -0.5 * (LN_2PI + var.ln()));
            total = g.add(total, lp)?;
        }
        Self::stage_check(&g, total, "prior")?;
        Ok(Built {
            graph: g,
            total,
            z,
            alpha: alpha_leaf,
        })
    }

    /// Stylized image at state `x`.
    pub fn image(&self, x: &[f64]) -> Result<Tensor> {
        let style = self.models.generator.generate(&Tensor::vector(&x[..self.z_dim()]))?;
        self.models
            .stylizer
            .stylize_alpha(self.content, crate::styletx::StyleSource::Vector(&style), self.alpha_of(x))
    }
}

impl Energy for StyleEnergy<'_> {
    fn dim(&self) -> usize {
        self.z_dim() + usize::from(self.alpha.is_sampled())
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        let b = self.build(x, false)?;
        b.graph.value(b.total).item()
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut b = self.build(x, true)?;
        let value = b.graph.value(b.total).item()?;
        b.graph.backward(b.total)?;
        let mut grad = b.graph.grad(b.z).into_vec();
        if let Some(a) = b.alpha {
            grad.push(b.graph.grad(a).item()?);
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Energy {
                stage: "gradient",
                detail: "non-finite gradient".into(),
            });
        }
        Ok((value, grad))
    }

    fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut x: Vec<f64> = (0..self.z_dim()).map(|_| rng.sample(StandardNormal)).collect();
        if let AlphaPolicy::Sampled { prior_mean, .. } = self.alpha {
            x.push(prior_mean);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_value_and_grad() {
        let e = GaussianEnergy::correlated_2d(0.8);
        let (v, g) = e.value_grad(&[1.0, 0.5]).unwrap();
        // P = [[1, -0.8], [-0.8, 1]] / 0.36
        let px = [(1.0 - 0.4) / 0.36, (-0.8 + 0.5) / 0.36];
        assert!((v + 0.5 * (px[0] + 0.5 * px[1])).abs() < 1e-12);
        assert!((g[0] + px[0]).abs() < 1e-12 && (g[1] + px[1]).abs() < 1e-12);
    }

    #[test]
    fn wrong_dimension() {
        assert!(matches!(
            GaussianEnergy::standard(3).value_grad(&[0.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn clip() {
        assert_eq!(clip_alpha(-0.3), 0.0);
        assert_eq!(clip_alpha(0.3), 0.3);
        assert_eq!(clip_alpha(7.0), 1.0);
    }
}
