use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adain;
use crate::error::{Error, Result};
use crate::nets::{Adam, AdamConfig, Codec, CodecSpec, DivergenceGuard, Network, ParamSet};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Decoder training objective `L = L_c + gamma * L_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferLossConfig {
    /// Style-loss weight.
    pub gamma: f64,
    /// Encoder stages (0-based) whose channel statistics enter the style loss.
    pub style_stages: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TransferLossConfig {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            style_stages: vec![0, 1],
            steps: 1500,
            batch: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TransferLossConfig {
    fn validate(&self, stages: usize) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch and lr must be positive".into()));
        }
        if let Some(s) = self.style_stages.iter().find(|&&s| s >= stages) {
            return Err(Error::Config(format!(
                "style stage {s} out of range (encoder has {stages})"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean of the last tenth of the loss trace.
    pub fn final_loss(&self) -> Option<f64> {
        let n = self.losses.len();
        if n == 0 {
            return None;
        }
        let tail = &self.losses[n - (n / 10).max(1)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Stacks `[C,H,W]` images into one `[N,C,H,W]` tensor.
pub(crate) fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("cannot stack zero images".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::Dimension(format!(
                "cannot stack {:?} with {:?}",
                img.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&shape, data)
}

fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Trains encoder and decoder jointly on plain reconstruction.
pub fn train_autoencoder(
    images: &[Tensor],
    spec: CodecSpec,
    cfg: &AutoencoderConfig,
) -> Result<(Codec, TrainReport)> {
    if images.is_empty() {
        return Err(Error::Contract("autoencoder needs a nonempty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut codec = Codec::new(spec, &mut rng)?;
    let opt_cfg = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut enc_opt = Adam::new(opt_cfg, codec.encoder.params());
    let mut dec_opt = Adam::new(opt_cfg, codec.decoder.params());
    let mut guard = DivergenceGuard::new();
    let mut report = TrainReport::default();
    let refs: Vec<&Tensor> = images.iter().collect();
    for step in 0..cfg.steps {
        let batch: Vec<&Tensor> = refs.choose_multiple(&mut rng, cfg.batch.min(refs.len())).copied().collect();
        let x = stack(&batch)?;
        let mut g = Graph::new();
        let eb = codec.encoder.params().bind(&mut g, true);
        let db = codec.decoder.params().bind(&mut g, true);
        let xv = g.constant(x);
        let f = codec.encoder.forward(&mut g, &eb, xv)?;
        let y = codec.decoder.forward(&mut g, &db, f)?;
        let loss = mse(&mut g, y, xv)?;
        let lv = g.value(loss).item()?;
        guard.check(step, lv)?;
        report.losses.push(lv);
        g.backward(loss)?;
        enc_opt.step(codec.encoder.params_mut(), &ParamSet::grads(&g, &eb));
        dec_opt.step(codec.decoder.params_mut(), &ParamSet::grads(&g, &db));
    }
    Ok((codec, report))
}

/// Trains the decoder of `codec` (encoder frozen) on the AdaIN objective:
/// content loss `|f_E(f_D(t)) - t|^2` plus `gamma` times the squared error of
/// per-channel `(mu, sigma)` at the configured encoder stages.
pub fn train_transfer(
    codec: &Codec,
    contents: &[Tensor],
    styles: &[Tensor],
    cfg: &TransferLossConfig,
) -> Result<(Codec, TrainReport)> {
    if contents.is_empty() || styles.is_empty() {
        return Err(Error::Contract("transfer training needs nonempty datasets".into()));
    }
    let stages = codec.spec().channels.len() - 1;
    cfg.validate(stages)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = codec.clone();
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        out.decoder.params(),
    );
    let mut guard = DivergenceGuard::new();
    let mut report = TrainReport::default();
    let content_refs: Vec<&Tensor> = contents.iter().collect();
    let style_refs: Vec<&Tensor> = styles.iter().collect();
    for step in 0..cfg.steps {
        let c: Vec<&Tensor> = (0..cfg.batch)
            .map(|_| *content_refs.choose(&mut rng).unwrap())
            .collect();
        let s: Vec<&Tensor> = (0..cfg.batch)
            .map(|_| *style_refs.choose(&mut rng).unwrap())
            .collect();
        let (xc, xs) = (stack(&c)?, stack(&s)?);

        let mut g = Graph::new();
        let eb = out.encoder.params().bind(&mut g, false);
        let db = out.decoder.params().bind(&mut g, true);
        let cv = g.constant(xc);
        let sv = g.constant(xs);
        let fc = out.encoder.forward(&mut g, &eb, cv)?;
        let style_stages = out.encoder.forward_stages(&mut g, &eb, sv)?;
        let mut style_stats = Vec::with_capacity(stages);
        for &st in &style_stages {
            style_stats.push(g.channel_stats(st)?);
        }
        let (mu_s, sigma_s) = *style_stats.last().unwrap();
        let t = adain(&mut g, fc, mu_s, sigma_s)?;
        let y = out.decoder.forward(&mut g, &db, t)?;
        let out_stages = out.encoder.forward_stages(&mut g, &eb, y)?;
        let mut loss = mse(&mut g, *out_stages.last().unwrap(), t)?;
        if cfg.gamma > 0.0 {
            for &i in &cfg.style_stages {
                let (mu_o, sigma_o) = g.channel_stats(out_stages[i])?;
                let (mu_t, sigma_t) = style_stats[i];
                let lm = mse(&mut g, mu_o, mu_t)?;
                let ls = mse(&mut g, sigma_o, sigma_t)?;
                let both = g.add(lm, ls)?;
                let weighted = g.scale(both, cfg.gamma);
                loss = g.add(loss, weighted)?;
            }
        }
        let lv = g.value(loss).item()?;
        guard.check(step, lv)?;
        report.losses.push(lv);
        g.backward(loss)?;
        opt.step(out.decoder.params_mut(), &ParamSet::grads(&g, &db));
    }
    Ok((out, report))
}
