//! The work behind each CLI subcommand. Every command reads the experiment
//! config, works under its output directory and returns a short summary.

use std::path::PathBuf;

use super::config::ExperimentConfig;
use super::data::{gen_synthetic_data, load_corpora, prepare_dir, read_json, write_json};
use super::enhance::{
    evaluate_all, load_rankings, rank_all, save_rankings, EnhanceSettings, Method, RunInfo, RunReport,
};
use super::pipeline::{
    load_codec, load_predictor, save_codec, save_gan, save_predictors, train_codec,
    train_gan, train_predictors, Role,
};
use super::report::{emit_report, summarize, write_mosaics};
use crate::attribute::AttributeMode;
use crate::error::{Error, Result};
use crate::sampler::SamplerKind;

pub fn gen_data(cfg: &ExperimentConfig, overwrite: bool) -> Result<String> {
    let c = gen_synthetic_data(cfg, overwrite)?;
    Ok(format!(
        "wrote {} contents, {} styles, {}+{} labelled, {} validation, {} test images to {}",
        c.contents.len(),
        c.styles.len(),
        c.internal.len(),
        c.external.len(),
        c.validation.len(),
        c.test.len(),
        cfg.data_dir().display()
    ))
}

pub fn train_codec_cmd(cfg: &ExperimentConfig) -> Result<String> {
    let corpora = load_corpora(cfg)?;
    let (codec, s) = train_codec(cfg, &corpora)?;
    save_codec(cfg, &codec, &s)?;
    let mut msg = format!(
        "codec: reconstruction loss {:.5} -> {:.5}, transfer loss {:.5} -> {:.5}, self-style PSNR {:.2} dB",
        s.autoencoder_initial, s.autoencoder_final, s.transfer_initial, s.transfer_final, s.self_style_psnr
    );
    if s.self_style_psnr < cfg.codec.psnr_floor {
        msg.push_str(&format!(" (below the {:.1} dB floor)", cfg.codec.psnr_floor));
    }
    Ok(msg)
}

/// Trains the predictors for `modes`, or for the configured attribute.
pub fn train_predictors_cmd(cfg: &ExperimentConfig, modes: &[AttributeMode]) -> Result<String> {
    let corpora = load_corpora(cfg)?;
    let modes = if modes.is_empty() { vec![cfg.attribute] } else { modes.to_vec() };
    let mut lines = vec![];
    for mode in modes {
        let (internal, external, s) = train_predictors(cfg, &corpora, mode)?;
        save_predictors(cfg, &internal, &external, &s)?;
        let fmt = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        lines.push(format!(
            "{mode:?} predictors: validation Spearman internal {}, external {}",
            fmt(s.internal_spearman),
            fmt(s.external_spearman)
        ));
    }
    Ok(lines.join("\n"))
}

pub fn train_gan_cmd(cfg: &ExperimentConfig) -> Result<String> {
    let corpora = load_corpora(cfg)?;
    let codec = load_codec(cfg)?;
    let (corpus, generator, s) = train_gan(cfg, &corpora, &codec)?;
    save_gan(cfg, &corpus, &generator, &s)?;
    Ok(format!(
        "generator trained on {} styles, final Wasserstein estimate {:.4}",
        s.styles, s.final_wasserstein
    ))
}

/// Command-line overrides for an enhancement run.
#[derive(Clone, Debug, Default)]
pub struct EnhanceOptions {
    pub methods: Vec<Method>,
    pub sampler: Option<SamplerKind>,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub samples: Option<usize>,
    /// Enhancement seed, a stream index under the master seed.
    pub seed: Option<u64>,
    /// Only the first `n` test images.
    pub images: Option<usize>,
    pub name: String,
    pub overwrite: bool,
}

impl EnhanceOptions {
    pub fn apply(&self, cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = cfg.clone();
        if let Some(s) = self.sampler {
            cfg.chain.sampler = s;
        }
        if let Some(t) = self.tau {
            cfg.chain.tau = t;
        }
        if let Some(l) = self.lambda {
            cfg.enhance.normalization.lambda = l;
        }
        if let Some(a) = self.alpha {
            cfg.enhance.alpha = a;
        }
        if let Some(m) = self.samples {
            cfg.chain.samples = m;
        }
        if let Some(s) = self.seed {
            cfg.chain.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// One set of options per (tau, lambda) grid point. With more than one
    /// point, each run is named `<name>_tau<t>_lambda<l>`.
    pub fn grid(&self, taus: &[f64], lambdas: &[f64]) -> Vec<EnhanceOptions> {
        let taus: Vec<Option<f64>> = if taus.is_empty() { vec![self.tau] } else { taus.iter().map(|&t| Some(t)).collect() };
        let lambdas: Vec<Option<f64>> =
            if lambdas.is_empty() { vec![self.lambda] } else { lambdas.iter().map(|&l| Some(l)).collect() };
        let single = taus.len() * lambdas.len() == 1;
        let mut out = vec![];
        for &tau in &taus {
            for &lambda in &lambdas {
                let mut o = self.clone();
                o.tau = tau;
                o.lambda = lambda;
                if !single {
                    let fmt = |v: Option<f64>| v.map_or("default".to_string(), |v| format!("{v}"));
                    o.name = format!("{}_tau{}_lambda{}", self.name, fmt(tau), fmt(lambda));
                }
                out.push(o);
            }
        }
        out
    }
}

pub fn run_dir(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.runs_dir().join(name)
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || name.starts_with('.') {
        return Err(Error::Config(format!("run name `{name}` must be a plain file name")));
    }
    Ok(())
}

/// The config a run was made with, relocated to the current output directory.
fn run_config(cfg: &ExperimentConfig, dir: &std::path::Path) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(&dir.join("config.toml"))?;
    c.out_dir = cfg.out_dir.clone();
    Ok(c)
}

/// Samples and ranks with the internal predictor only. The external predictor
/// is not loaded.
pub fn enhance(cfg: &ExperimentConfig, opts: &EnhanceOptions) -> Result<String> {
    check_name(&opts.name)?;
    let cfg = opts.apply(cfg)?;
    let methods = if opts.methods.is_empty() {
        vec![Method::Baseline, Method::Bae, Method::Abae]
    } else {
        opts.methods.clone()
    };
    let corpora = load_corpora(&cfg)?;
    let (corpus, generator) = super::pipeline::load_gan(&cfg)?;
    let stylizer = crate::styletx::Stylizer::new(load_codec(&cfg)?);
    let internal = load_predictor(&cfg, Role::Internal, cfg.attribute)?;
    let models = super::enhance::RankingModels {
        stylizer: &stylizer,
        styles: corpus.styles(),
        generator: &generator,
        internal: &internal,
    };
    let test = &corpora.test[..opts.images.unwrap_or(usize::MAX).min(corpora.test.len())];
    let dir = run_dir(&cfg, &opts.name);
    prepare_dir(&dir, opts.overwrite)?;
    let settings = EnhanceSettings::from_config(&cfg, &methods);
    let rankings = rank_all(test, models, &settings)?;
    cfg.save(&dir.join("config.toml"))?;
    save_rankings(&dir, &RunInfo::from_config(&cfg), &rankings)?;
    Ok(format!(
        "ranked {} methods on {} test images into {}",
        methods.len(),
        test.len(),
        dir.display()
    ))
}

/// Scores a run's ranked candidates with the external predictor.
pub fn evaluate(cfg: &ExperimentConfig, name: &str) -> Result<String> {
    check_name(name)?;
    let dir = run_dir(cfg, name);
    let run_cfg = run_config(cfg, &dir)?;
    let (info, rankings) = load_rankings(&dir)?;
    let corpora = load_corpora(&run_cfg)?;
    let test = &corpora.test[..rankings.len().min(corpora.test.len())];
    let external = load_predictor(&run_cfg, Role::External, run_cfg.attribute)?;
    let images = evaluate_all(test, &rankings, &external)?;
    let report = RunReport { info, images };
    write_json(&dir.join("run.json"), &report)?;
    let lines: Vec<String> = summarize(&report)
        .aggregate
        .iter()
        .map(|r| format!("{:>8} top-{:<2} mean delta {:+.4}", r.method.name(), r.top_n, r.mean_delta))
        .collect();
    Ok(lines.join("\n"))
}

/// Tables, plots and mosaics for an evaluated run.
pub fn report(cfg: &ExperimentConfig, name: &str) -> Result<String> {
    check_name(name)?;
    let dir = run_dir(cfg, name);
    let run_cfg = run_config(cfg, &dir)?;
    let report: RunReport = read_json(&dir.join("run.json")).map_err(|e| match e {
        Error::Ingestion { .. } if !dir.join("run.json").exists() => {
            Error::Config(format!("run `{name}` has not been evaluated yet"))
        }
        other => other,
    })?;
    let out = cfg.report_dir().join(name);
    emit_report(&report, &out)?;
    let (_, rankings) = load_rankings(&dir)?;
    let corpora = load_corpora(&run_cfg)?;
    write_mosaics(&out.join("top"), &corpora.test, &rankings, run_cfg.enhance.png_images, 5)?;
    Ok(format!("report written to {}", out.display()))
}

/// Every stage in order, for one attribute. Each grid point gets its own
/// enhance, evaluate and report.
pub fn run_all(cfg: &ExperimentConfig, grid: &[EnhanceOptions]) -> Result<String> {
    let overwrite = grid.iter().any(|o| o.overwrite);
    let mut lines = vec![gen_data(cfg, overwrite)?];
    lines.push(train_codec_cmd(cfg)?);
    lines.push(train_predictors_cmd(cfg, &[])?);
    lines.push(train_gan_cmd(cfg)?);
    for opts in grid {
        lines.push(enhance(cfg, opts)?);
        lines.push(format!("[{}]", opts.name));
        lines.push(evaluate(cfg, &opts.name)?);
        lines.push(report(cfg, &opts.name)?);
    }
    Ok(lines.join("\n"))
}
