use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimiser over one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

/// Fires when the loss stays above ten times its first value for 100
/// consecutive steps, or turns non-finite.
pub(crate) struct DivergenceGuard {
    initial: Option<f64>,
    streak: usize,
}

impl DivergenceGuard {
    const FACTOR: f64 = 10.0;
    const PATIENCE: usize = 100;

    pub(crate) fn new() -> Self {
        Self {
            initial: None,
            streak: 0,
        }
    }

    pub(crate) fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: step,
                reason: format!("loss became {loss}"),
            });
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > initial * Self::FACTOR {
            self.streak += 1;
            if self.streak >= Self::PATIENCE {
                return Err(Error::TrainingDiverged {
                    iteration: step,
                    reason: format!(
                        "loss above {}x its initial value {initial:.4e} for {} steps",
                        Self::FACTOR,
                        Self::PATIENCE
                    ),
                });
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        let mut ps = ParamSet::new();
        ps.push("x", Tensor::vector(&[3.0, -2.0]));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &ps,
        );
        for _ in 0..2000 {
            let g = ps.values()[0].map(|x| 2.0 * x);
            opt.step(&mut ps, &[g]);
        }
        assert!(ps.values()[0].data().iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn guard_trips_after_patience() {
        let mut g = DivergenceGuard::new();
        g.check(0, 1.0).unwrap();
        for i in 1..100 {
            g.check(i, 11.0).unwrap();
        }
        assert!(matches!(g.check(100, 11.0), Err(Error::TrainingDiverged { .. })));
        let mut g = DivergenceGuard::new();
        assert!(g.check(0, f64::NAN).is_err());
    }

    #[test]
    fn guard_resets_on_recovery() {
        let mut g = DivergenceGuard::new();
        g.check(0, 1.0).unwrap();
        for i in 0..300 {
            let l = if i % 50 == 0 { 0.5 } else { 20.0 };
            g.check(i + 1, l).unwrap();
        }
    }
}
