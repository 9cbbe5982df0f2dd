//! Oracles shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use bae::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradient entries smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Builds a scalar loss from leaves bound to the given inputs.
pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> bae::Result<Var> + 'a;

fn loss_value(build: &Build<'_>, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.value(out).item().expect("scalar loss")
}

/// Largest relative error between backward gradients and central finite
/// differences, over every entry of every input.
pub fn gradcheck(build: &Build<'_>, inputs: &[Tensor], h: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let x = input.data()[i];
            work[k].data_mut()[i] = x + h;
            let up = loss_value(build, &work);
            work[k].data_mut()[i] = x - h;
            let down = loss_value(build, &work);
            work[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
        }
    }
    worst
}

/// Reduces any node to a scalar through fixed pseudo-random weights, so every
/// output entry contributes a distinct amount to the loss.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> bae::Result<Var> {
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = g.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// Uniform entries in `[low, high]` whose magnitude is at least `gap`.
pub fn away_from_zero(shape: &[usize], low: f64, high: f64, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(low..high);
            if v.abs() >= gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, low, high, rng)
}

/// Population mean and standard deviation of each channel of `[C,H,W]`.
pub fn channel_moments(x: &Tensor) -> Vec<(f64, f64)> {
    let s = x.shape();
    let hw = s[1] * s[2];
    x.data()
        .chunks(hw)
        .map(|c| {
            let m = c.iter().sum::<f64>() / hw as f64;
            let v = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw as f64;
            (m, v.sqrt())
        })
        .collect()
}

/// Untrained models; enough to exercise the plumbing without training.
pub struct RandomModels {
    pub stylizer: bae::styletx::Stylizer,
    pub generator: bae::nets::StyleGenerator,
    pub internal: bae::attribute::Predictor,
    pub external: bae::attribute::Predictor,
}

impl RandomModels {
    pub fn new(seed: u64, mode: bae::attribute::AttributeMode) -> Self {
        use bae::nets::{Codec, CodecSpec, PredictorNet, PredictorSpec};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codec = Codec::new(CodecSpec::default(), &mut rng).unwrap();
        let gan = bae::stylegan::GanConfig {
            z_dim: 4,
            generator_hidden: vec![16],
            seed,
            ..Default::default()
        };
        let generator = bae::stylegan::untrained_generator(codec.spec().feature_channels(), &gan).unwrap();
        let mut predictor = || bae::attribute::Predictor::new(PredictorNet::new(PredictorSpec::default(), &mut rng).unwrap(), mode);
        let internal = predictor();
        let external = predictor();
        Self {
            stylizer: bae::styletx::Stylizer::new(codec),
            generator,
            internal,
            external,
        }
    }

    pub fn energy_models(&self) -> bae::sampler::Models<'_> {
        bae::sampler::Models {
            generator: &self.generator,
            stylizer: &self.stylizer,
            predictor: &self.internal,
        }
    }
}
