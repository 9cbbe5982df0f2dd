use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{AdaptiveGradient, AdaptiveLr, ChainConfig, ChainResult, CountMode, SamplerKind, TraceRow};
use crate::error::{Error, Result};
use crate::sampler::Energy;

/// Current state with its cached energy and gradient.
#[derive(Clone, Debug)]
struct State {
    x: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
}

impl State {
    fn at<E: Energy>(energy: &E, x: Vec<f64>, need_grad: bool) -> Result<Self> {
        let (value, grad) = if need_grad {
            energy.value_grad(&x)?
        } else {
            (energy.value(&x)?, Vec::new())
        };
        if !value.is_finite() {
            return Err(Error::Energy {
                stage: "chain",
                detail: format!("energy {value} at the chain state"),
            });
        }
        Ok(Self { x, value, grad })
    }
}

/// Evaluates a proposal; a non-finite energy makes it a certain rejection.
fn try_state<E: Energy>(energy: &E, x: Vec<f64>, need_grad: bool) -> Result<Option<State>> {
    match State::at(energy, x, need_grad) {
        Ok(s) => Ok(Some(s)),
        Err(Error::Energy { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn sq_dist(a: &[f64], b: &[f64], drift: &[f64], tau: f64) -> f64 {
    a.iter()
        .zip(b)
        .zip(drift)
        .map(|((a, b), d)| (a - b - tau * d).powi(2))
        .sum()
}

/// Leapfrog integration of `(x, p)` under `H = -O(x) + |p|^2 / 2`, unit mass.
/// Returns the end point, its momentum, and the energy and gradient there.
pub fn leapfrog<E: Energy>(
    energy: &E,
    x: &[f64],
    p: &[f64],
    step: f64,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>, f64, Vec<f64>)> {
    let (_, grad) = energy.value_grad(x)?;
    leapfrog_from(energy, x, p, &grad, step, steps)
}

fn leapfrog_from<E: Energy>(
    energy: &E,
    x: &[f64],
    p: &[f64],
    grad: &[f64],
    step: f64,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>, f64, Vec<f64>)> {
    let mut x = x.to_vec();
    let mut p: Vec<f64> = p.iter().zip(grad).map(|(p, g)| p + 0.5 * step * g).collect();
    let mut value = 0.0;
    let mut grad = grad.to_vec();
    for i in 0..steps {
        x.iter_mut().zip(&p).for_each(|(x, p)| *x += step * p);
        (value, grad) = energy.value_grad(&x)?;
        let h = if i + 1 == steps { 0.5 * step } else { step };
        p.iter_mut().zip(&grad).for_each(|(p, g)| *p += h * g);
    }
    Ok((x, p, value, grad))
}

/// Runs the configured chain on `energy`.
pub fn run_chain<E: Energy>(energy: &E, cfg: &ChainConfig) -> Result<ChainResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = match &cfg.init {
        Some(x) => x.clone(),
        None => energy.init(&mut rng),
    };
    let need_grad = cfg.sampler != SamplerKind::MetropolisHastings;
    let mut state = State::at(energy, start, need_grad)?;
    let mut lr = AdaptiveLr::new(cfg.tau, cfg.decay);
    let mut ag = AdaptiveGradient::new(energy.dim());
    let mut result = ChainResult::default();
    let mut streak = 0usize;
    let mut step = 0usize;

    while result.samples.len() < cfg.samples {
        let scale = if cfg.adaptive_lr { lr.tau() / cfg.tau } else { 1.0 };
        let candidate = match cfg.sampler {
            SamplerKind::Langevin => {
                let tau = cfg.tau * scale;
                propose_mala(energy, &state, tau, cfg.adaptive_gradient.then_some(&mut ag), &mut rng)?
            }
            SamplerKind::MetropolisHastings => {
                let s = cfg.proposal_std * scale;
                let x: Vec<f64> = state
                    .x
                    .iter()
                    .map(|v| v + s * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                try_state(energy, x, false)?.map(|c| {
                    let log_r = c.value - state.value;
                    (c, log_r)
                })
            }
            SamplerKind::Hamiltonian => {
                let eps = cfg.leapfrog_step * scale;
                let p: Vec<f64> = (0..state.x.len()).map(|_| rng.sample(StandardNormal)).collect();
                let h0 = -state.value + 0.5 * p.iter().map(|v| v * v).sum::<f64>();
                match leapfrog_from(energy, &state.x, &p, &state.grad, eps, cfg.leapfrog_steps) {
                    Ok((x, p1, value, grad)) => {
                        let h1 = -value + 0.5 * p1.iter().map(|v| v * v).sum::<f64>();
                        let ok = h1.is_finite() && x.iter().all(|v| v.is_finite());
                        ok.then_some((State { x, value, grad }, h0 - h1))
                    }
                    Err(Error::Energy { .. }) => None,
                    Err(e) => return Err(e),
                }
            }
        };

        // always draw the uniform so the random stream does not depend on the branch
        let u: f64 = rng.random();
        let accepted = match candidate {
            Some((c, log_r)) if log_r >= 0.0 || u.ln() < log_r => {
                state = c;
                true
            }
            _ => false,
        };
        if accepted {
            lr.accept();
            streak = 0;
            result.accepted += 1;
        } else {
            lr.reject();
            streak += 1;
            if streak >= cfg.max_rejections {
                return Err(Error::StuckChain { rejections: streak });
            }
        }
        result.proposals += 1;
        result.trace.push(TraceRow {
            step,
            energy: state.value,
            tau: if cfg.adaptive_lr { lr.tau() } else { cfg.tau },
            accepted,
        });
        step += 1;

        if step > cfg.burn_in {
            let keep = match cfg.count {
                CountMode::Accepted => accepted,
                CountMode::Proposals => true,
            };
            if keep {
                result.samples.push(state.x.clone());
                result.energies.push(state.value);
            }
        }
    }
    Ok(result)
}

/// One MALA proposal and its log acceptance ratio.
fn propose_mala<E: Energy, R: Rng>(
    energy: &E,
    state: &State,
    tau: f64,
    mut ag: Option<&mut AdaptiveGradient>,
    rng: &mut R,
) -> Result<Option<(State, f64)>> {
    let drift = match ag.as_deref_mut() {
        Some(ag) => ag.step(&state.grad),
        None => state.grad.clone(),
    };
    let noise = (2.0 * tau).sqrt();
    let x: Vec<f64> = state
        .x
        .iter()
        .zip(&drift)
        .map(|(v, d)| v + tau * d + noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let Some(c) = try_state(energy, x, true)? else {
        return Ok(None);
    };
    let back = match ag.as_deref() {
        Some(ag) => ag.peek(&c.grad),
        None => c.grad.clone(),
    };
    let fwd = sq_dist(&c.x, &state.x, &drift, tau);
    let rev = sq_dist(&state.x, &c.x, &back, tau);
    let log_r = c.value - state.value + (fwd - rev) / (4.0 * tau);
    Ok(Some((c, log_r)))
}
