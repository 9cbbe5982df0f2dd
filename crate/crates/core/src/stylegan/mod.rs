//! Style-space density: a WGAN-GP trained on normalised `[mu | ln sigma]`
//! style vectors.

mod ring;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{
    build_generator, encode_style, Adam, AdamConfig, Encoder, FeatureNorm, Mlp, MlpSpec, Network,
    ParamSet, StyleGenerator, StyleVector,
};
use crate::tensor::{Checkpoint, Graph, Tensor, Var};

pub use ring::{covered_modes, ring_centers, ring_samples, RingSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub batch: usize,
    /// Generator updates.
    pub iterations: usize,
    pub critic_steps: usize,
    pub penalty: f64,
    pub z_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            iterations: 20_000,
            critic_steps: 5,
            penalty: 10.0,
            z_dim: 64,
            generator_hidden: vec![128, 512],
            critic_hidden: vec![512, 256, 128],
            lr_generator: 1e-4,
            lr_critic: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!("GAN batch must be >= 2, got {}", self.batch)));
        }
        if !(self.penalty >= 0.0) {
            return Err(Error::Config(format!("penalty weight must be >= 0, got {}", self.penalty)));
        }
        if self.z_dim == 0 || self.critic_steps == 0 {
            return Err(Error::Config("z_dim and critic_steps must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// Per generator update: critic loss of the last critic step, generator loss
/// and the Wasserstein estimate `E[D(real)] - E[D(fake)]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanReport {
    pub critic_loss: Vec<f64>,
    pub generator_loss: Vec<f64>,
    pub wasserstein: Vec<f64>,
}

/// Style vectors of `K` style images with feature-wise normalisation of their
/// log-space form.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCorpus {
    styles: Vec<StyleVector>,
    norm: FeatureNorm,
}

impl StyleCorpus {
    pub fn from_styles(styles: Vec<StyleVector>) -> Result<Self> {
        let first = styles
            .first()
            .ok_or_else(|| Error::Contract("style corpus must not be empty".into()))?;
        let dim = 2 * first.channels();
        if let Some(i) = styles.iter().position(|s| 2 * s.channels() != dim) {
            return Err(Error::Dimension(format!("style {i} has a different channel count")));
        }
        let logs: Vec<Vec<f64>> = styles.iter().map(StyleVector::to_log_space).collect();
        let k = logs.len() as f64;
        let mut mean = vec![0.0; dim];
        for v in &logs {
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / k);
        }
        let mut var = vec![0.0; dim];
        for v in &logs {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                *s += (x - m) * (x - m) / k;
            }
        }
        let scale = var
            .into_iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self {
            styles,
            norm: FeatureNorm { mean, scale },
        })
    }

    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.styles[0].channels()
    }

    pub fn styles(&self) -> &[StyleVector] {
        &self.styles
    }

    pub fn norm(&self) -> &FeatureNorm {
        &self.norm
    }

    /// Normalised log-space rows, `[K, 2C]`.
    pub fn normalized(&self) -> Tensor {
        let dim = 2 * self.channels();
        let mut data = Vec::with_capacity(self.len() * dim);
        for s in &self.styles {
            data.extend(self.norm.normalize(&s.to_log_space()));
        }
        Tensor::from_parts(vec![self.len(), dim], data)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let dim = 2 * self.channels();
        let flat: Vec<f64> = self.styles.iter().flat_map(StyleVector::flatten).collect();
        let mut c = Checkpoint::new();
        c.insert("styles", Tensor::from_parts(vec![self.len(), dim], flat));
        c.insert("norm.mean", Tensor::vector(&self.norm.mean));
        c.insert("norm.scale", Tensor::vector(&self.norm.scale));
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let t = ckpt.require("styles")?;
        let [k, dim] = t.shape()[..] else {
            return Err(Error::Checkpoint("styles must be a matrix".into()));
        };
        let styles = (0..k)
            .map(|i| StyleVector::from_flat(&t.data()[i * dim..(i + 1) * dim]))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut corpus = Self::from_styles(styles)?;
        corpus.norm = FeatureNorm {
            mean: ckpt.require("norm.mean")?.data().to_vec(),
            scale: ckpt.require("norm.scale")?.data().to_vec(),
        };
        if corpus.norm.dim() != dim || corpus.norm.scale.len() != dim {
            return Err(Error::Checkpoint("corpus normalisation has the wrong length".into()));
        }
        Ok(corpus)
    }
}

/// Encodes every style image. Images must be finite `[3,H,W]` tensors with
/// values in `[0, 1]`; the first offender is reported by index.
pub fn build_corpus(style_images: &[Tensor], encoder: &Encoder) -> Result<StyleCorpus> {
    if style_images.is_empty() {
        return Err(Error::Contract("style corpus needs at least one image".into()));
    }
    let expect = encoder.spec().image_shape();
    let mut styles = Vec::with_capacity(style_images.len());
    for (i, img) in style_images.iter().enumerate() {
        let reason = if img.shape() != expect {
            Some(format!("shape {:?}, expected {expect:?}", img.shape()))
        } else if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            Some("pixel values outside [0, 1]".to_string())
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(Error::Ingestion {
                item: format!("style image #{i}"),
                reason,
            });
        }
        styles.push(encode_style(img, encoder)?);
    }
    StyleCorpus::from_styles(styles)
}

/// Critic `D`: a scalar-output MLP.
pub type Critic = Mlp;

/// Fresh generator and critic exactly as training would start them.
pub fn init_nets(data_dim: usize, cfg: &GanConfig) -> Result<(Mlp, Critic)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_with(&mut rng, data_dim, cfg)
}

fn init_with(rng: &mut ChaCha8Rng, data_dim: usize, cfg: &GanConfig) -> Result<(Mlp, Critic)> {
    let g = Mlp::new(cfg.z_dim, MlpSpec::relu_stack(&cfg.generator_hidden, data_dim), rng)?;
    let d = Mlp::new(data_dim, MlpSpec::relu_stack(&cfg.critic_hidden, 1), rng)?;
    Ok((g, d))
}

/// `(||grad_x D(x)|| - 1)^2` per row of `x`, as a graph node `[B, 1]`.
fn penalty_terms(g: &mut Graph, critic: &Mlp, bound: &[Var], x: Var) -> Result<Var> {
    let (_, dx) = critic.forward_with_input_grad(g, bound, x)?;
    let sq = g.square(dx);
    let norm2 = g.sum_axis(sq, 1)?;
    let norm2 = g.offset(norm2, 1e-12);
    let norm = g.sqrt(norm2)?;
    let dev = g.offset(norm, -1.0);
    Ok(g.square(dev))
}

/// Mean gradient penalty of `critic` at the rows of `points` (`[B, d]`).
pub fn gradient_penalty(critic: &Critic, points: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let bound = critic.params().bind(&mut g, false);
    let x = g.constant(points.clone());
    let terms = penalty_terms(&mut g, critic, &bound, x)?;
    let m = g.mean(terms);
    g.value(m).item()
}

fn diverged(iteration: usize, what: &str, value: f64) -> Error {
    Error::TrainingDiverged {
        iteration,
        reason: format!("{what} became {value}"),
    }
}

fn minibatch(data: &Tensor, rng: &mut ChaCha8Rng, batch: usize) -> Tensor {
    let (k, d) = (data.shape()[0], data.shape()[1]);
    let idx = sample_indices(rng, k, batch.min(k));
    let mut out = Vec::with_capacity(batch * d);
    for i in idx.iter() {
        out.extend_from_slice(&data.data()[i * d..(i + 1) * d]);
    }
    Tensor::from_parts(vec![idx.len(), d], out)
}

/// WGAN-GP on the rows of `data` (`[K, d]`). Returns the generator MLP
/// (`z -> R^d`), the critic and loss traces.
pub fn train_wgan_gp_points(data: &Tensor, cfg: &GanConfig) -> Result<(Mlp, Critic, GanReport)> {
    cfg.validate()?;
    let [k, dim] = data.shape()[..] else {
        return Err(Error::Dimension(format!("GAN data must be [K, d], got {:?}", data.shape())));
    };
    if k < cfg.batch {
        return Err(Error::Contract(format!(
            "corpus of {k} rows is smaller than the batch size {}",
            cfg.batch
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut gen, mut critic) = init_with(&mut rng, dim, cfg)?;
    let mut g_opt = Adam::new(cfg.adam(cfg.lr_generator), gen.params());
    let mut d_opt = Adam::new(cfg.adam(cfg.lr_critic), critic.params());
    let mut report = GanReport::default();
    let b = cfg.batch;

    for it in 0..cfg.iterations {
        let mut last_critic = 0.0;
        let mut w_est = 0.0;
        for _ in 0..cfg.critic_steps {
            let real = minibatch(data, &mut rng, b);
            let z = Tensor::randn(&[b, cfg.z_dim], &mut rng);
            let fake = {
                let mut g = Graph::new();
                let gb = gen.params().bind(&mut g, false);
                let zv = g.constant(z);
                let y = gen.forward(&mut g, &gb, zv)?;
                g.value(y).clone()
            };
            let eps: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
            let mut mix = Vec::with_capacity(b * dim);
            for (i, e) in eps.iter().enumerate() {
                let r = &real.data()[i * dim..(i + 1) * dim];
                let f = &fake.data()[i * dim..(i + 1) * dim];
                mix.extend(r.iter().zip(f).map(|(r, f)| e * r + (1.0 - e) * f));
            }
            let mix = Tensor::from_parts(vec![b, dim], mix);

            let mut g = Graph::new();
            let db = critic.params().bind(&mut g, true);
            let rv = g.constant(real);
            let fv = g.constant(fake);
            let d_real = critic.forward(&mut g, &db, rv)?;
            let d_fake = critic.forward(&mut g, &db, fv)?;
            let d_real = g.mean(d_real);
            let d_fake = g.mean(d_fake);
            let mut loss = g.sub(d_fake, d_real)?;
            w_est = g.value(d_real).item()? - g.value(d_fake).item()?;
            if cfg.penalty > 0.0 {
                let mv = g.constant(mix);
                let terms = penalty_terms(&mut g, &critic, &db, mv)?;
                let gp = g.mean(terms);
                let gp = g.scale(gp, cfg.penalty);
                loss = g.add(loss, gp)?;
            }
            last_critic = g.value(loss).item()?;
            if !last_critic.is_finite() {
                return Err(diverged(it, "critic loss", last_critic));
            }
            g.backward(loss)?;
            d_opt.step(critic.params_mut(), &ParamSet::grads(&g, &db));
        }

        let z = Tensor::randn(&[b, cfg.z_dim], &mut rng);
        let mut g = Graph::new();
        let gb = gen.params().bind(&mut g, true);
        let db = critic.params().bind(&mut g, false);
        let zv = g.constant(z);
        let fake = gen.forward(&mut g, &gb, zv)?;
        let d_fake = critic.forward(&mut g, &db, fake)?;
        let m = g.mean(d_fake);
        let loss = g.neg(m);
        let gl = g.value(loss).item()?;
        if !gl.is_finite() {
            return Err(diverged(it, "generator loss", gl));
        }
        g.backward(loss)?;
        g_opt.step(gen.params_mut(), &ParamSet::grads(&g, &gb));

        report.critic_loss.push(last_critic);
        report.generator_loss.push(gl);
        report.wasserstein.push(w_est);
    }
    Ok((gen, critic, report))
}

/// Trains `G` on the corpus and attaches the corpus normalisation, so the
/// generator emits de-normalised styles.
pub fn train_wgan_gp(
    corpus: &StyleCorpus,
    cfg: &GanConfig,
) -> Result<(StyleGenerator, Critic, GanReport)> {
    let (mlp, critic, report) = train_wgan_gp_points(&corpus.normalized(), cfg)?;
    let gen = StyleGenerator::from_parts(mlp, corpus.channels(), corpus.norm().clone())?;
    Ok((gen, critic, report))
}

/// Untrained generator with the default layer layout for `C` channels.
pub fn untrained_generator(channels: usize, cfg: &GanConfig) -> Result<StyleGenerator> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    build_generator(
        MlpSpec::relu_stack(&cfg.generator_hidden, 2 * channels),
        cfg.z_dim,
        channels,
        &mut rng,
    )
}

/// `n` styles from `z ~ N(0, I)`.
pub fn sample_styles(gen: &StyleGenerator, n: usize, seed: u64) -> Result<Vec<StyleVector>> {
    if n == 0 {
        return Err(Error::Contract("sample_styles needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| gen.generate(&Tensor::randn(&[gen.z_dim()], &mut rng)))
        .collect()
}

/// Runs a plain MLP generator on `n` latents, returning `[n, d]`.
pub fn sample_points(gen: &Mlp, n: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::randn(&[n, gen.in_dim()], &mut rng);
    let mut g = Graph::new();
    let b = gen.params().bind(&mut g, false);
    let zv = g.constant(z);
    let y = gen.forward(&mut g, &b, zv)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, CodecSpec};

    fn style(vals: &[f64]) -> StyleVector {
        StyleVector::from_flat(vals).unwrap()
    }

    #[test]
    fn single_style_has_unit_scale() {
        let c = StyleCorpus::from_styles(vec![style(&[0.3, 2.0])]).unwrap();
        assert_eq!(c.norm().scale, vec![1.0, 1.0]);
        assert_eq!(c.norm().mean, vec![0.3, 2.0f64.ln()]);
    }

    #[test]
    fn linear_unit_critic_has_zero_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut critic = Mlp::new(2, MlpSpec::new(&[(1, Activation::None)]), &mut rng).unwrap();
        critic.params_mut().values_mut()[0] = Tensor::new(&[2, 1], vec![0.6, 0.8]).unwrap();
        let pts = Tensor::randn(&[16, 2], &mut rng);
        assert!(gradient_penalty(&critic, &pts).unwrap().abs() < 1e-20);
    }

    #[test]
    fn zero_iterations_leave_init() {
        let cfg = GanConfig {
            iterations: 0,
            penalty: 0.0,
            batch: 2,
            z_dim: 2,
            generator_hidden: vec![8],
            critic_hidden: vec![8],
            ..Default::default()
        };
        let data = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (g, d, _) = train_wgan_gp_points(&data, &cfg).unwrap();
        let (g0, d0) = init_nets(2, &cfg).unwrap();
        assert!(g.params().bit_eq(g0.params()));
        assert!(d.params().bit_eq(d0.params()));
    }

    #[test]
    fn batch_larger_than_corpus_rejected() {
        let data = Tensor::zeros(&[3, 2]);
        let err = train_wgan_gp_points(&data, &GanConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn corpus_rejects_bad_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(CodecSpec::default(), &mut rng).unwrap();
        let ok = Tensor::full(&[3, 16, 16], 0.5);
        let bad = Tensor::full(&[3, 16, 16], 2.0);
        match build_corpus(&[ok, bad], &enc) {
            Err(Error::Ingestion { item, .. }) => assert_eq!(item, "style image #1"),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }
}
