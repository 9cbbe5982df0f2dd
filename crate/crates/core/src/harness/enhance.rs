//! Baseline, BAE, ABAE and the random-style control on single content
//! images, ranking by the internal predictor and evaluation by the external
//! one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::Item;
use super::pipeline::TrainedModels;
use super::seeds::{stage_seed, Stage};
use crate::attribute::{NormalizationSpec, Predictor, Scorer};
use crate::error::{Error, Result};
use crate::nets::StyleVector;
use crate::sampler::{sample_styles_bae, AlphaPolicy, ChainConfig, Models, SamplerKind};
use crate::styletx::{ContentFeatures, StyleSource, Stylizer};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Every corpus style at the fixed strength.
    Baseline,
    Bae,
    Abae,
    /// `M` latents drawn from the prior, no chain.
    Random,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Bae, Method::Abae, Method::Random];

    fn code(self) -> u64 {
        match self {
            Method::Baseline => 0,
            Method::Bae => 1,
            Method::Abae => 2,
            Method::Random => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Bae => "bae",
            Method::Abae => "abae",
            Method::Random => "random",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (baseline, bae, abae, random)")))
    }
}

/// One stylization among a method's candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    /// Position in the method's candidate list: corpus index or sample index.
    pub sample: usize,
    pub internal: f64,
    pub alpha: f64,
    pub image: Tensor,
}

/// Candidates ordered by internal score, best first, with their count before
/// truncation.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub total: usize,
    pub top: Vec<Candidate>,
    pub proposals: usize,
    pub accepted: usize,
}

/// Indices of `scores` sorted descending, ties by lower index.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn rank(images: Vec<(Tensor, f64)>, internal: &Predictor, keep: usize) -> Result<Ranking> {
    let refs: Vec<&Tensor> = images.iter().map(|(im, _)| im).collect();
    let scores = internal.score_many(&refs)?;
    let order = rank_order(&scores);
    let mut slots: Vec<Option<(Tensor, f64)>> = images.into_iter().map(Some).collect();
    let top = order
        .iter()
        .take(keep)
        .map(|&i| {
            let (image, alpha) = slots[i].take().expect("each index once");
            Candidate {
                sample: i,
                internal: scores[i],
                alpha,
                image,
            }
        })
        .collect();
    Ok(Ranking {
        total: scores.len(),
        top,
        proposals: 0,
        accepted: 0,
    })
}

/// Stylizes with every style at `alpha` and ranks by the internal predictor.
pub fn run_baseline_b(
    content: &ContentFeatures,
    styles: &[StyleVector],
    stylizer: &Stylizer,
    internal: &Predictor,
    alpha: f64,
    keep: usize,
) -> Result<Ranking> {
    if styles.is_empty() {
        return Err(Error::Contract("baseline needs at least one style".into()));
    }
    let images = styles
        .iter()
        .map(|s| Ok((stylizer.stylize_alpha(content, StyleSource::Vector(s), alpha)?, alpha)))
        .collect::<Result<Vec<_>>>()?;
    rank(images, internal, keep)
}

/// Samples styles (and strengths under [`AlphaPolicy::Sampled`]) with the
/// configured chain and ranks them by the internal predictor.
pub fn run_bae(
    content: &ContentFeatures,
    models: Models<'_>,
    spec: NormalizationSpec,
    alpha: AlphaPolicy,
    chain: &ChainConfig,
    keep: usize,
) -> Result<Ranking> {
    let (samples, result) = sample_styles_bae(content, models, spec, alpha, chain)?;
    let images = samples
        .iter()
        .map(|s| {
            let style = models.generator.generate(&Tensor::vector(&s.z))?;
            let img = models
                .stylizer
                .stylize_alpha(content, StyleSource::Vector(&style), s.alpha)?;
            Ok((img, s.alpha))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ranking = rank(images, models.predictor, keep)?;
    ranking.proposals = result.proposals;
    ranking.accepted = result.accepted;
    Ok(ranking)
}

/// `m` latents from `N(0, I)` at a fixed strength, ranked like the others.
pub fn run_random(
    content: &ContentFeatures,
    models: Models<'_>,
    alpha: f64,
    m: usize,
    seed: u64,
    keep: usize,
) -> Result<Ranking> {
    if m == 0 {
        return Err(Error::Contract("random control needs m >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..m)
        .map(|_| {
            let z = Tensor::randn(&[models.generator.z_dim()], &mut rng);
            let style = models.generator.generate(&z)?;
            Ok((
                models
                    .stylizer
                    .stylize_alpha(content, StyleSource::Vector(&style), alpha)?,
                alpha,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    rank(images, models.predictor, keep)
}

/// External score difference, stylized minus original.
pub fn delta_a(original: &Tensor, stylized: &Tensor, external: &dyn Scorer) -> Result<f64> {
    Ok(external.score(stylized)? - external.score(original)?)
}

/// A ranked candidate after external evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub rank: usize,
    pub sample: usize,
    pub internal: f64,
    pub external: f64,
    pub delta: f64,
    pub alpha: f64,
}

/// Mean `delta` over the first `n` entries of an internally ranked list.
pub fn topn_mean_delta(ranked: &[Ranked], n: usize) -> Result<f64> {
    if n == 0 || n > ranked.len() {
        return Err(Error::Contract(format!(
            "top-{n} needs 1 <= N <= {} ranked results",
            ranked.len()
        )));
    }
    Ok(ranked[..n].iter().map(|r| r.delta).sum::<f64>() / n as f64)
}

/// One method's ranked candidates on one image, before external evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRanking {
    pub method: Method,
    pub ranking: Ranking,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRanking {
    pub id: String,
    pub methods: Vec<MethodRanking>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: Method,
    pub candidates: usize,
    pub proposals: usize,
    pub accepted: usize,
    pub ranked: Vec<Ranked>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: String,
    pub original_external: f64,
    pub runs: Vec<MethodRun>,
}

impl ImageReport {
    pub fn run(&self, method: Method) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.method == method)
    }
}

/// Progress points of [`enhance_image`], for instrumentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// All methods have sampled and ranked their candidates.
    Ranked,
    /// External scores are in.
    Evaluated,
}

/// What to run and how, resolved from the experiment config.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceSettings {
    pub methods: Vec<Method>,
    pub chain: ChainConfig,
    pub spec: NormalizationSpec,
    pub alpha: f64,
    pub alpha_prior: (f64, f64),
    pub keep: usize,
    pub master_seed: u64,
}

impl EnhanceSettings {
    pub fn from_config(cfg: &ExperimentConfig, methods: &[Method]) -> Self {
        Self {
            methods: methods.to_vec(),
            chain: cfg.chain.clone(),
            spec: cfg.enhance.normalization,
            alpha: cfg.enhance.alpha,
            alpha_prior: (cfg.enhance.alpha_prior_mean, cfg.enhance.alpha_prior_std),
            keep: cfg.enhance.top_n.iter().copied().max().unwrap_or(1),
            master_seed: cfg.master_seed,
        }
    }

    fn seed(&self, stage: Stage, image: usize, method: Method) -> u64 {
        let index = (self.chain.seed << 24) | ((image as u64) << 4) | method.code();
        stage_seed(self.master_seed, stage, index)
    }
}

/// The models enhancement may use. The external predictor is deliberately
/// absent.
#[derive(Clone, Copy)]
pub struct RankingModels<'a> {
    pub stylizer: &'a Stylizer,
    pub styles: &'a [StyleVector],
    pub generator: &'a crate::nets::StyleGenerator,
    pub internal: &'a Predictor,
}

impl TrainedModels {
    pub fn ranking_view(&self) -> RankingModels<'_> {
        RankingModels {
            stylizer: &self.stylizer,
            styles: self.corpus.styles(),
            generator: &self.generator,
            internal: &self.internal,
        }
    }
}

fn ranking_for(
    method: Method,
    index: usize,
    content: &ContentFeatures,
    models: RankingModels<'_>,
    s: &EnhanceSettings,
) -> Result<Ranking> {
    let m = Models {
        generator: models.generator,
        stylizer: models.stylizer,
        predictor: models.internal,
    };
    let chain = |seed| ChainConfig {
        seed,
        ..s.chain.clone()
    };
    match method {
        Method::Baseline => run_baseline_b(
            content,
            models.styles,
            models.stylizer,
            models.internal,
            s.alpha,
            s.keep,
        ),
        Method::Bae => run_bae(
            content,
            m,
            s.spec,
            AlphaPolicy::Fixed { alpha: s.alpha },
            &chain(s.seed(Stage::Chain, index, method)),
            s.keep,
        ),
        Method::Abae => run_bae(
            content,
            m,
            s.spec,
            AlphaPolicy::Sampled {
                prior_mean: s.alpha_prior.0,
                prior_std: s.alpha_prior.1,
            },
            &chain(s.seed(Stage::Chain, index, method)),
            s.keep,
        ),
        Method::Random => run_random(
            content,
            m,
            s.alpha,
            s.chain.samples,
            s.seed(Stage::RandomControl, index, method),
            s.keep,
        ),
    }
}

fn in_image(id: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Image {
        id: id.to_string(),
        source: Box::new(e),
    }
}

/// Runs every configured method on test image `index` and ranks the results
/// by the internal predictor.
pub fn rank_image(
    index: usize,
    item: &Item,
    models: RankingModels<'_>,
    settings: &EnhanceSettings,
) -> Result<ImageRanking> {
    let wrap = in_image(&item.id);
    let content = models.stylizer.content(&item.image).map_err(&wrap)?;
    let methods = settings
        .methods
        .iter()
        .map(|&method| {
            ranking_for(method, index, &content, models, settings)
                .map(|ranking| MethodRanking { method, ranking })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(&wrap)?;
    Ok(ImageRanking {
        id: item.id.clone(),
        methods,
    })
}

/// Scores the original and the kept candidates with the external predictor.
pub fn evaluate_image(item: &Item, ranking: &ImageRanking, external: &dyn Scorer) -> Result<ImageReport> {
    let wrap = in_image(&item.id);
    let original = external.score(&item.image).map_err(&wrap)?;
    let mut runs = Vec::with_capacity(ranking.methods.len());
    for mr in &ranking.methods {
        let r = &mr.ranking;
        let refs: Vec<&Tensor> = r.top.iter().map(|c| &c.image).collect();
        let ext = external.score_many(&refs).map_err(&wrap)?;
        let ranked = r
            .top
            .iter()
            .zip(&ext)
            .enumerate()
            .map(|(k, (c, &e))| Ranked {
                rank: k + 1,
                sample: c.sample,
                internal: c.internal,
                external: e,
                delta: e - original,
                alpha: c.alpha,
            })
            .collect();
        runs.push(MethodRun {
            method: mr.method,
            candidates: r.total,
            proposals: r.proposals,
            accepted: r.accepted,
            ranked,
        });
    }
    Ok(ImageReport {
        id: item.id.clone(),
        original_external: original,
        runs,
    })
}

/// [`rank_image`] then [`evaluate_image`], reporting each phase to `observe`.
pub fn enhance_image(
    index: usize,
    item: &Item,
    models: RankingModels<'_>,
    settings: &EnhanceSettings,
    external: &dyn Scorer,
    observe: &mut dyn FnMut(Phase),
) -> Result<(ImageRanking, ImageReport)> {
    let ranking = rank_image(index, item, models, settings)?;
    observe(Phase::Ranked);
    let report = evaluate_image(item, &ranking, external)?;
    observe(Phase::Evaluated);
    Ok((ranking, report))
}

/// Ranks every test image in parallel. Results come back in input order.
pub fn rank_all(
    items: &[Item],
    models: RankingModels<'_>,
    settings: &EnhanceSettings,
) -> Result<Vec<ImageRanking>> {
    items
        .par_iter()
        .enumerate()
        .map(|(i, item)| rank_image(i, item, models, settings))
        .collect()
}

/// Evaluates rankings produced by [`rank_all`] for the same `items`.
pub fn evaluate_all(
    items: &[Item],
    rankings: &[ImageRanking],
    external: &dyn Scorer,
) -> Result<Vec<ImageReport>> {
    if items.len() != rankings.len() {
        return Err(Error::Contract(format!(
            "{} test images but {} rankings",
            items.len(),
            rankings.len()
        )));
    }
    items
        .par_iter()
        .zip(rankings)
        .map(|(item, r)| {
            if item.id != r.id {
                return Err(Error::Contract(format!("ranking for `{}` paired with `{}`", r.id, item.id)));
            }
            evaluate_image(item, r, external)
        })
        .collect()
}

/// Run-level metadata carried into reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub attribute: crate::attribute::AttributeMode,
    pub master_seed: u64,
    pub sampler: SamplerKind,
    pub tau: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub samples: usize,
    pub top_n: Vec<usize>,
}

impl RunInfo {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            attribute: cfg.attribute,
            master_seed: cfg.master_seed,
            sampler: cfg.chain.sampler,
            tau: cfg.chain.tau,
            lambda: cfg.enhance.normalization.lambda,
            alpha: cfg.enhance.alpha,
            samples: cfg.chain.samples,
            top_n: cfg.enhance.top_n.clone(),
        }
    }
}

/// All per-image results of one enhancement run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub info: RunInfo,
    pub images: Vec<ImageReport>,
}

impl RunReport {
    /// Mean over images of the top-`n` mean delta of `method`; `None` when
    /// the method did not run or some image has fewer than `n` results.
    pub fn mean_topn_delta(&self, method: Method, n: usize) -> Option<f64> {
        if self.images.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for img in &self.images {
            total += topn_mean_delta(&img.run(method)?.ranked, n).ok()?;
        }
        Some(total / self.images.len() as f64)
    }
}

#[derive(Serialize, Deserialize)]
struct StoredCandidate {
    sample: usize,
    internal: f64,
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
struct StoredMethod {
    method: Method,
    total: usize,
    proposals: usize,
    accepted: usize,
    top: Vec<StoredCandidate>,
}

#[derive(Serialize, Deserialize)]
struct StoredImage {
    id: String,
    methods: Vec<StoredMethod>,
}

#[derive(Serialize, Deserialize)]
struct RankingFile {
    info: RunInfo,
    images: Vec<StoredImage>,
}

fn candidate_key(id: &str, method: Method, k: usize) -> String {
    format!("{id}/{method}/{k}")
}

/// Writes `ranking.json` and the kept images as `candidates.ckpt` in `dir`.
pub fn save_rankings(dir: &std::path::Path, info: &RunInfo, rankings: &[ImageRanking]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut ckpt = crate::tensor::Checkpoint::new();
    let images = rankings
        .iter()
        .map(|r| StoredImage {
            id: r.id.clone(),
            methods: r
                .methods
                .iter()
                .map(|m| {
                    for (k, c) in m.ranking.top.iter().enumerate() {
                        ckpt.insert(candidate_key(&r.id, m.method, k), c.image.clone());
                    }
                    StoredMethod {
                        method: m.method,
                        total: m.ranking.total,
                        proposals: m.ranking.proposals,
                        accepted: m.ranking.accepted,
                        top: m
                            .ranking
                            .top
                            .iter()
                            .map(|c| StoredCandidate {
                                sample: c.sample,
                                internal: c.internal,
                                alpha: c.alpha,
                            })
                            .collect(),
                    }
                })
                .collect(),
        })
        .collect();
    let file = RankingFile {
        info: info.clone(),
        images,
    };
    super::data::write_json(&dir.join("ranking.json"), &file)?;
    ckpt.save(dir.join("candidates.ckpt"))
}

/// Reads what [`save_rankings`] wrote.
pub fn load_rankings(dir: &std::path::Path) -> Result<(RunInfo, Vec<ImageRanking>)> {
    let file: RankingFile = super::data::read_json(&dir.join("ranking.json"))?;
    let ckpt = crate::tensor::Checkpoint::load(dir.join("candidates.ckpt"))?;
    let rankings = file
        .images
        .into_iter()
        .map(|img| {
            let methods = img
                .methods
                .into_iter()
                .map(|m| {
                    let top = m
                        .top
                        .into_iter()
                        .enumerate()
                        .map(|(k, c)| {
                            Ok(Candidate {
                                sample: c.sample,
                                internal: c.internal,
                                alpha: c.alpha,
                                image: ckpt.require(&candidate_key(&img.id, m.method, k))?.clone(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(MethodRanking {
                        method: m.method,
                        ranking: Ranking {
                            total: m.total,
                            top,
                            proposals: m.proposals,
                            accepted: m.accepted,
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageRanking { id: img.id, methods })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((file.info, rankings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranked(deltas: &[f64]) -> Vec<Ranked> {
        deltas
            .iter()
            .enumerate()
            .map(|(i, &d)| Ranked {
                rank: i + 1,
                sample: i,
                internal: -(i as f64),
                external: d,
                delta: d,
                alpha: 0.5,
            })
            .collect()
    }

    #[test]
    fn order_is_descending_with_index_ties() {
        assert_eq!(rank_order(&[0.1, 0.5, 0.5, -1.0, 0.7]), vec![4, 1, 2, 0, 3]);
    }

    #[test]
    fn topn_cases() {
        let r = ranked(&[0.3, 0.1, -0.2]);
        assert_eq!(topn_mean_delta(&r, 1).unwrap(), 0.3);
        assert!((topn_mean_delta(&r, 3).unwrap() - 0.2 / 3.0).abs() < 1e-15);
        assert!(matches!(topn_mean_delta(&r, 4), Err(Error::Contract(_))));
        assert!(matches!(topn_mean_delta(&r, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("s3".parse::<Method>().is_err());
    }
}
