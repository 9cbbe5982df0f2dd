//! Training stages. Each stage derives its seed from the master seed, using
//! the component's own `seed` field as the stream index.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{images, labels, truth, write_json, Corpora};
use super::seeds::{stage_seed, Stage};
use crate::attribute::{evaluate_predictor, train_predictor, AttributeMode, Predictor};
use crate::error::{Error, Result};
use crate::nets::{Codec, Network, StyleGenerator};
use crate::stylegan::{build_corpus, train_wgan_gp, StyleCorpus};
use crate::styletx::{train_autoencoder, train_transfer, Stylizer};
use crate::tensor::{Checkpoint, Tensor};

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel() as f64;
    let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecSummary {
    pub autoencoder_initial: f64,
    pub autoencoder_final: f64,
    pub transfer_initial: f64,
    pub transfer_final: f64,
    /// Mean PSNR of `Z(I, s_I)` against `I` over the validation images.
    pub self_style_psnr: f64,
}

/// Autoencoder pre-training on contents and styles, then decoder training on
/// the transfer objective.
pub fn train_codec(cfg: &ExperimentConfig, corpora: &Corpora) -> Result<(Codec, CodecSummary)> {
    let mut ae = cfg.codec.autoencoder.clone();
    ae.seed = stage_seed(cfg.master_seed, Stage::Codec, ae.seed);
    let mut pool = images(&corpora.contents);
    pool.extend(images(&corpora.styles));
    let (codec, ae_report) = train_autoencoder(&pool, cfg.codec.spec.clone(), &ae)?;

    let mut tx = cfg.codec.transfer.clone();
    tx.seed = stage_seed(cfg.master_seed, Stage::Transfer, tx.seed);
    let (codec, tx_report) =
        train_transfer(&codec, &images(&corpora.contents), &images(&corpora.styles), &tx)?;

    let stylizer = Stylizer::new(codec);
    let mut total = 0.0;
    for it in &corpora.validation {
        let content = stylizer.content(&it.image)?;
        let out = stylizer.stylize_alpha(
            &content,
            crate::styletx::StyleSource::Image(&it.image),
            0.0,
        )?;
        total += psnr(&out, &it.image).min(100.0);
    }
    let summary = CodecSummary {
        autoencoder_initial: ae_report.initial_loss().unwrap_or(f64::NAN),
        autoencoder_final: ae_report.final_loss().unwrap_or(f64::NAN),
        transfer_initial: tx_report.initial_loss().unwrap_or(f64::NAN),
        transfer_final: tx_report.final_loss().unwrap_or(f64::NAN),
        self_style_psnr: total / corpora.validation.len() as f64,
    };
    let codec = stylizer.codec().clone();
    Ok((codec, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorSummary {
    pub mode: AttributeMode,
    pub internal_final_loss: f64,
    pub external_final_loss: f64,
    /// Rank correlation with the noise-free hidden attribute on the
    /// validation images.
    pub internal_spearman: Option<f64>,
    pub external_spearman: Option<f64>,
}

fn tail_mean(v: &[f64]) -> f64 {
    let tail = &v[v.len() - (v.len() / 10).max(1)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Internal and external predictors for `mode`, each on its own labelled split.
pub fn train_predictors(
    cfg: &ExperimentConfig,
    corpora: &Corpora,
    mode: AttributeMode,
) -> Result<(Predictor, Predictor, PredictorSummary)> {
    let fit = |items: &[super::data::Item], stage: Stage| {
        let mut pc = cfg.predictor.clone();
        pc.seed = stage_seed(cfg.master_seed, stage, pc.seed);
        train_predictor(&images(items), &labels(items, mode), mode, &pc)
    };
    let (internal, li) = fit(&corpora.internal, Stage::PredictorInternal)?;
    let (external, le) = fit(&corpora.external, Stage::PredictorExternal)?;
    let val = images(&corpora.validation);
    let val_truth = truth(&corpora.validation, mode);
    let summary = PredictorSummary {
        mode,
        internal_final_loss: tail_mean(&li),
        external_final_loss: tail_mean(&le),
        internal_spearman: evaluate_predictor(&internal, &val, &val_truth)?,
        external_spearman: evaluate_predictor(&external, &val, &val_truth)?,
    };
    Ok((internal, external, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanSummary {
    pub styles: usize,
    pub final_critic_loss: f64,
    pub final_wasserstein: f64,
}

/// Encodes the style images with the trained encoder and fits the generator.
pub fn train_gan(
    cfg: &ExperimentConfig,
    corpora: &Corpora,
    codec: &Codec,
) -> Result<(StyleCorpus, StyleGenerator, GanSummary)> {
    let corpus = build_corpus(&images(&corpora.styles), &codec.encoder)?;
    let mut gc = cfg.gan.clone();
    gc.seed = stage_seed(cfg.master_seed, Stage::Gan, gc.seed);
    gc.batch = gc.batch.min(corpus.len());
    let (generator, _, report) = train_wgan_gp(&corpus, &gc)?;
    let summary = GanSummary {
        styles: corpus.len(),
        final_critic_loss: report.critic_loss.last().copied().unwrap_or(f64::NAN),
        final_wasserstein: report.wasserstein.last().copied().unwrap_or(f64::NAN),
    };
    Ok((corpus, generator, summary))
}

/// Every trained model of one experiment.
#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub stylizer: Stylizer,
    pub corpus: StyleCorpus,
    pub generator: StyleGenerator,
    pub internal: Predictor,
    /// Used for evaluation only; enhancement never sees it.
    pub external: Predictor,
}

fn predictor_file(role: &str, mode: AttributeMode) -> String {
    let m = match mode {
        AttributeMode::Regression => "regression",
        AttributeMode::Binary => "binary",
    };
    format!("predictor_{role}_{m}.ckpt")
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} is missing; run the training stage first",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

fn models_dir(cfg: &ExperimentConfig) -> Result<std::path::PathBuf> {
    let dir = cfg.models_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn save_codec(cfg: &ExperimentConfig, codec: &Codec, summary: &CodecSummary) -> Result<()> {
    let dir = models_dir(cfg)?;
    codec.to_checkpoint().save(dir.join("codec.ckpt"))?;
    write_json(&dir.join("codec.json"), summary)
}

pub fn load_codec(cfg: &ExperimentConfig) -> Result<Codec> {
    Codec::from_checkpoint(&load_ckpt(&cfg.models_dir().join("codec.ckpt"))?)
}

pub fn save_predictors(
    cfg: &ExperimentConfig,
    internal: &Predictor,
    external: &Predictor,
    summary: &PredictorSummary,
) -> Result<()> {
    let dir = models_dir(cfg)?;
    internal.to_checkpoint().save(dir.join(predictor_file("internal", summary.mode)))?;
    external.to_checkpoint().save(dir.join(predictor_file("external", summary.mode)))?;
    let name = predictor_file("summary", summary.mode).replace(".ckpt", ".json");
    write_json(&dir.join(name), summary)
}

/// Which of the two predictors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Internal,
    External,
}

pub fn load_predictor(cfg: &ExperimentConfig, role: Role, mode: AttributeMode) -> Result<Predictor> {
    let name = match role {
        Role::Internal => "internal",
        Role::External => "external",
    };
    Predictor::from_checkpoint(&load_ckpt(&cfg.models_dir().join(predictor_file(name, mode)))?)
}

pub fn save_gan(
    cfg: &ExperimentConfig,
    corpus: &StyleCorpus,
    generator: &StyleGenerator,
    summary: &GanSummary,
) -> Result<()> {
    let dir = models_dir(cfg)?;
    corpus.to_checkpoint().save(dir.join("corpus.ckpt"))?;
    generator.to_checkpoint().save(dir.join("generator.ckpt"))?;
    write_json(&dir.join("gan.json"), summary)
}

pub fn load_gan(cfg: &ExperimentConfig) -> Result<(StyleCorpus, StyleGenerator)> {
    let dir = cfg.models_dir();
    Ok((
        StyleCorpus::from_checkpoint(&load_ckpt(&dir.join("corpus.ckpt"))?)?,
        StyleGenerator::from_checkpoint(&load_ckpt(&dir.join("generator.ckpt"))?)?,
    ))
}

pub fn load_models(cfg: &ExperimentConfig) -> Result<TrainedModels> {
    let codec = load_codec(cfg)?;
    let (corpus, generator) = load_gan(cfg)?;
    let internal = load_predictor(cfg, Role::Internal, cfg.attribute)?;
    let external = load_predictor(cfg, Role::External, cfg.attribute)?;
    Ok(TrainedModels {
        stylizer: Stylizer::new(codec),
        corpus,
        generator,
        internal,
        external,
    })
}

/// Runs every training stage in memory, without touching the disk.
pub fn train_all(cfg: &ExperimentConfig, corpora: &Corpora) -> Result<TrainedModels> {
    let (codec, _) = train_codec(cfg, corpora)?;
    let (corpus, generator, _) = train_gan(cfg, corpora, &codec)?;
    let (internal, external, _) = train_predictors(cfg, corpora, cfg.attribute)?;
    Ok(TrainedModels {
        stylizer: Stylizer::new(codec),
        corpus,
        generator,
        internal,
        external,
    })
}
