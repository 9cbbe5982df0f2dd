//! Energies over style latents and the chains that sample them: random-walk
//! Metropolis-Hastings, Metropolis-adjusted Langevin and Hamiltonian Monte
//! Carlo, with optional moment-normalised gradients and step-size decay on
//! rejection.
//!
//! Moment-normalised Langevin proposals do not satisfy detailed balance
//! exactly; they are meant for enhancement runs, not for exact sampling.

mod chains;
pub mod diagnostics;
mod energy;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribute::NormalizationSpec;
use crate::error::{Error, Result};
use crate::styletx::ContentFeatures;

pub use chains::{leapfrog, run_chain};
pub use energy::{
    clip_alpha, AlphaPolicy, Energy, FlatEnergy, FnEnergy, GaussianEnergy, Models, StyleEnergy,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    #[serde(rename = "mh")]
    MetropolisHastings,
    #[serde(rename = "langevin")]
    Langevin,
    #[serde(rename = "hmc")]
    Hamiltonian,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mh" | "metropolis-hastings" => Ok(Self::MetropolisHastings),
            "langevin" | "mala" => Ok(Self::Langevin),
            "hmc" | "hamiltonian" => Ok(Self::Hamiltonian),
            other => Err(Error::Config(format!("unknown sampler {other:?}"))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MetropolisHastings => "mh",
            Self::Langevin => "langevin",
            Self::Hamiltonian => "hmc",
        })
    }
}

/// What `samples` counts after burn-in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    /// Record the state after each accepted proposal.
    Accepted,
    /// Record the state after every proposal; the usual MCMC estimator.
    Proposals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub sampler: SamplerKind,
    /// Langevin step size; for the other samplers the adaptive decay is
    /// applied to their own step as the ratio `tau / tau_0`.
    pub tau: f64,
    pub samples: usize,
    pub count: CountMode,
    pub adaptive_gradient: bool,
    pub adaptive_lr: bool,
    pub decay: f64,
    pub burn_in: usize,
    pub seed: u64,
    pub leapfrog_steps: usize,
    pub leapfrog_step: f64,
    pub proposal_std: f64,
    pub max_rejections: usize,
    /// Starting point; drawn from the energy's initialiser when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Langevin,
            tau: 0.1,
            samples: 500,
            count: CountMode::Accepted,
            adaptive_gradient: false,
            adaptive_lr: false,
            decay: 0.9,
            burn_in: 200,
            seed: 0,
            leapfrog_steps: 10,
            leapfrog_step: 0.05,
            proposal_std: 0.5,
            max_rejections: 10_000,
            init: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.samples == 0 {
            return bad("samples must be >= 1".into());
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad(format!("decay must lie in (0, 1), got {}", self.decay));
        }
        if self.leapfrog_steps == 0 || !(self.leapfrog_step > 0.0) || !(self.proposal_std > 0.0) {
            return bad("leapfrog steps, leapfrog step and proposal std must be positive".into());
        }
        if self.max_rejections == 0 {
            return bad("max_rejections must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Energy of the chain state after this proposal.
    pub energy: f64,
    /// Step size after this proposal's update.
    pub tau: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChainResult {
    pub samples: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
    pub proposals: usize,
    pub accepted: usize,
    pub trace: Vec<TraceRow>,
}

impl ChainResult {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    /// Values of coordinate `i` across samples.
    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[i]).collect()
    }
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    for row in trace {
        w.serialize(row).map_err(|e| Error::Serialization(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Bias-corrected first/second moment normalisation of a gradient stream,
/// `m_hat / (sqrt(v_hat) + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveGradient {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdaptiveGradient {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn apply(&self, g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let t = self.t + 1;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut m = self.m.clone();
        let mut v = self.v.clone();
        let mut out = Vec::with_capacity(g.len());
        for ((m, v), &g) in m.iter_mut().zip(v.iter_mut()).zip(g) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            out.push((*m / c1) / ((*v / c2).sqrt() + self.eps));
        }
        (out, m, v)
    }

    /// Folds `g` into the moments and returns the normalised gradient.
    pub fn step(&mut self, g: &[f64]) -> Vec<f64> {
        let (out, m, v) = self.apply(g);
        self.m = m;
        self.v = v;
        self.t += 1;
        out
    }

    /// What [`step`](Self::step) would return, without changing the state.
    pub fn peek(&self, g: &[f64]) -> Vec<f64> {
        self.apply(g).0
    }
}

/// Step size that shrinks by `decay` on every rejection and returns to its
/// initial value on acceptance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveLr {
    initial: f64,
    tau: f64,
    decay: f64,
}

impl AdaptiveLr {
    pub fn new(initial: f64, decay: f64) -> Self {
        Self {
            initial,
            tau: initial,
            decay,
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn reject(&mut self) {
        self.tau = (self.tau * self.decay).max(f64::MIN_POSITIVE);
    }

    pub fn accept(&mut self) {
        self.tau = self.initial;
    }
}

/// One sampled style latent with the strength it is applied at.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSample {
    pub z: Vec<f64>,
    /// Clipped into `[0, 1]`.
    pub alpha: f64,
    pub energy: f64,
}

/// Runs the chain on the style energy of one content image and returns the
/// collected latents with their strengths.
pub fn sample_styles_bae(
    content: &ContentFeatures,
    models: Models<'_>,
    spec: NormalizationSpec,
    alpha: AlphaPolicy,
    cfg: &ChainConfig,
) -> Result<(Vec<StyleSample>, ChainResult)> {
    let energy = StyleEnergy::new(content, models, spec, alpha)?;
    let result = run_chain(&energy, cfg)?;
    let zd = energy.z_dim();
    let samples = result
        .samples
        .iter()
        .zip(&result.energies)
        .map(|(x, &e)| StyleSample {
            z: x[..zd].to_vec(),
            alpha: energy.alpha_of(x),
            energy: e,
        })
        .collect();
    Ok((samples, result))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_trace_rule() {
        let mut lr = AdaptiveLr::new(0.2, 0.9);
        lr.reject();
        assert_eq!(lr.tau(), 0.2 * 0.9);
        lr.reject();
        assert_eq!(lr.tau(), 0.2 * 0.9 * 0.9);
        lr.accept();
        assert_eq!(lr.tau(), 0.2);
        for _ in 0..20_000 {
            lr.reject();
        }
        assert!(lr.tau() > 0.0);
    }

    #[test]
    fn zero_gradient_stays_zero() {
        let mut ag = AdaptiveGradient::new(3);
        for _ in 0..10 {
            assert_eq!(ag.step(&[0.0; 3]), vec![0.0; 3]);
        }
    }

    #[test]
    fn peek_matches_step() {
        let mut ag = AdaptiveGradient::new(2);
        ag.step(&[1.0, -2.0]);
        let p = ag.peek(&[0.5, 3.0]);
        assert_eq!(ag.step(&[0.5, 3.0]), p);
    }

    #[test]
    fn config_validation() {
        assert!(ChainConfig::default().validate().is_ok());
        let bad = ChainConfig {
            decay: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ChainConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sampler_names_round_trip() {
        for k in [SamplerKind::MetropolisHastings, SamplerKind::Langevin, SamplerKind::Hamiltonian] {
            assert_eq!(k.to_string().parse::<SamplerKind>().unwrap(), k);
        }
    }
}
