//! Attribute predictors and the normalisations that turn their raw output into
//! the probability factor `P_A` of the energy.

mod labels;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Adam, AdamConfig, DivergenceGuard, Network, ParamSet, PredictorNet, PredictorSpec};
use crate::styletx::stack;
use crate::tensor::{graph, Checkpoint, Graph, Tensor, Var};

pub use labels::{read_labels, write_labels, LabelRecord};

/// Floor on the base of `P_A` before taking logs.
pub const SCORE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeMode {
    /// Real-valued labels, squared-error training, raw output is the linear head.
    Regression,
    /// `{0, 1}` labels, cross-entropy training, raw output is a probability.
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationMode {
    /// `sigmoid(raw)^lambda`
    SigmoidPower,
    /// `raw^lambda`, raw must lie in `[0, 1]`
    Power,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub mode: NormalizationMode,
    pub lambda: f64,
}

impl NormalizationSpec {
    pub fn sigmoid_power(lambda: f64) -> Self {
        Self {
            mode: NormalizationMode::SigmoidPower,
            lambda,
        }
    }

    pub fn power(lambda: f64) -> Self {
        Self {
            mode: NormalizationMode::Power,
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }

    fn base(&self, raw: f64) -> Result<f64> {
        match self.mode {
            NormalizationMode::SigmoidPower => Ok(graph::sigmoid(raw)),
            NormalizationMode::Power if (0.0..=1.0).contains(&raw) => Ok(raw),
            NormalizationMode::Power => Err(Error::Domain(format!(
                "power normalisation needs a raw score in [0, 1], got {raw}"
            ))),
        }
    }
}

/// `P_A` for one raw predictor output.
pub fn normalize_score(raw: f64, spec: &NormalizationSpec) -> Result<f64> {
    spec.validate()?;
    Ok(spec.base(raw)?.powf(spec.lambda))
}

/// `log P_A = lambda * log(base)`, computed without forming `P_A` so that
/// large `lambda` cannot underflow it. A raw probability (power mode) is
/// floored at `SCORE_FLOOR` first; the sigmoid form is exact in log space.
pub fn log_normalized_score(raw: f64, spec: &NormalizationSpec) -> Result<f64> {
    spec.validate()?;
    let log_base = match spec.mode {
        NormalizationMode::SigmoidPower => -graph::softplus(-raw),
        NormalizationMode::Power => spec.base(raw)?.max(SCORE_FLOOR).ln(),
    };
    Ok(spec.lambda * log_base)
}

/// A trained scorer `P̂_A` with its output convention.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    net: PredictorNet,
    mode: AttributeMode,
}

impl Predictor {
    pub fn new(net: PredictorNet, mode: AttributeMode) -> Self {
        Self { net, mode }
    }

    pub fn net(&self) -> &PredictorNet {
        &self.net
    }

    pub fn mode(&self) -> AttributeMode {
        self.mode
    }

    fn logit_graph(&self, g: &mut Graph, bound: &[Var], image: Var) -> Result<Var> {
        self.net.forward(g, bound, image)
    }

    /// Raw score node `[N, 1]`; a probability in binary mode.
    pub fn raw_graph(&self, g: &mut Graph, bound: &[Var], image: Var) -> Result<Var> {
        let out = self.logit_graph(g, bound, image)?;
        Ok(match self.mode {
            AttributeMode::Regression => out,
            AttributeMode::Binary => g.sigmoid(out),
        })
    }

    /// `log P_A` node `[N, 1]` under `spec`.
    ///
    /// Binary scores go through `log_sigmoid` of the logit rather than the
    /// floored probability, so the gradient survives far from the boundary.
    pub fn log_score_graph(
        &self,
        g: &mut Graph,
        bound: &[Var],
        image: Var,
        spec: &NormalizationSpec,
    ) -> Result<Var> {
        spec.validate()?;
        let out = self.logit_graph(g, bound, image)?;
        let log_base = match (spec.mode, self.mode) {
            (NormalizationMode::SigmoidPower, AttributeMode::Regression) => g.log_sigmoid(out),
            (NormalizationMode::SigmoidPower, AttributeMode::Binary) => {
                let p = g.sigmoid(out);
                g.log_sigmoid(p)
            }
            (NormalizationMode::Power, AttributeMode::Binary) => g.log_sigmoid(out),
            (NormalizationMode::Power, AttributeMode::Regression) => {
                if let Some(bad) = g.value(out).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::Domain(format!(
                        "power normalisation needs a raw score in [0, 1], got {bad}"
                    )));
                }
                let floored = g.clamp(out, SCORE_FLOOR, 1.0);
                g.log(floored)?
            }
        };
        Ok(g.scale(log_base, spec.lambda))
    }

    /// Raw scores of a batch of `[3,H,W]` images.
    pub fn score_batch(&self, images: &[&Tensor]) -> Result<Vec<f64>> {
        let x = stack(images)?;
        let mut g = Graph::new();
        let bound = self.net.params().bind(&mut g, false);
        let xv = g.constant(x);
        let raw = self.raw_graph(&mut g, &bound, xv)?;
        Ok(g.value(raw).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.net.to_checkpoint();
        let code = match self.mode {
            AttributeMode::Regression => 0.0,
            AttributeMode::Binary => 1.0,
        };
        c.insert("meta.mode", Tensor::vector(&[code]));
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mode = match ckpt.require("meta.mode")?.data() {
            [m] if *m == 0.0 => AttributeMode::Regression,
            [m] if *m == 1.0 => AttributeMode::Binary,
            other => return Err(Error::Checkpoint(format!("unknown predictor mode {other:?}"))),
        };
        Ok(Self {
            net: PredictorNet::from_checkpoint(ckpt)?,
            mode,
        })
    }
}

/// Anything that turns an image into a raw attribute score.
pub trait Scorer: Sync {
    fn score(&self, image: &Tensor) -> Result<f64>;

    fn score_many(&self, images: &[&Tensor]) -> Result<Vec<f64>> {
        images.iter().map(|im| self.score(im)).collect()
    }
}

impl Scorer for Predictor {
    fn score(&self, image: &Tensor) -> Result<f64> {
        Ok(self.score_batch(&[image])?[0])
    }

    fn score_many(&self, images: &[&Tensor]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            out.extend(self.score_batch(chunk)?);
        }
        Ok(out)
    }
}

/// Wraps a scorer and counts how many images it has scored.
pub struct CountingScorer<'a> {
    inner: &'a dyn Scorer,
    calls: std::sync::atomic::AtomicUsize,
}

impl<'a> CountingScorer<'a> {
    pub fn new(inner: &'a dyn Scorer) -> Self {
        Self {
            inner,
            calls: Default::default(),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl Scorer for CountingScorer<'_> {
    fn score(&self, image: &Tensor) -> Result<f64> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.score(image)
    }

    fn score_many(&self, images: &[&Tensor]) -> Result<Vec<f64>> {
        self.calls
            .fetch_add(images.len(), std::sync::atomic::Ordering::SeqCst);
        self.inner.score_many(images)
    }
}

/// Raw score and, when `spec` is given, the normalised score.
pub fn score_image(
    image: &Tensor,
    predictor: &dyn Scorer,
    spec: Option<&NormalizationSpec>,
) -> Result<(f64, Option<f64>)> {
    let raw = predictor.score(image)?;
    let norm = spec.map(|s| normalize_score(raw, s)).transpose()?;
    Ok((raw, norm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorTrainConfig {
    pub spec: PredictorSpec,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            spec: PredictorSpec::default(),
            steps: 2000,
            batch: 16,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Fits a predictor to `labels`. Regression minimises squared error; binary
/// minimises cross-entropy on the logit. Returns the per-step loss trace.
pub fn train_predictor(
    images: &[Tensor],
    labels: &[f64],
    mode: AttributeMode,
    cfg: &PredictorTrainConfig,
) -> Result<(Predictor, Vec<f64>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Contract(format!(
            "need one label per image, got {} images and {} labels",
            images.len(),
            labels.len()
        )));
    }
    if mode == AttributeMode::Binary && labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Contract("binary labels must be 0 or 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = PredictorNet::new(cfg.spec.clone(), &mut rng)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        net.params(),
    );
    let mut guard = DivergenceGuard::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let n = images.len();
    for step in 0..cfg.steps {
        let idx = sample_indices(&mut rng, n, cfg.batch.min(n));
        let batch: Vec<&Tensor> = idx.iter().map(|i| &images[i]).collect();
        let y: Vec<f64> = idx.iter().map(|i| labels[i]).collect();
        let mut g = Graph::new();
        let bound = net.params().bind(&mut g, true);
        let xv = g.constant(stack(&batch)?);
        let yv = g.constant(Tensor::new(&[y.len(), 1], y)?);
        let out = net.forward(&mut g, &bound, xv)?;
        let per = match mode {
            AttributeMode::Regression => {
                let d = g.sub(out, yv)?;
                g.square(d)
            }
            AttributeMode::Binary => {
                // softplus(l) - y l
                let sp = g.softplus(out);
                let yl = g.mul(yv, out)?;
                g.sub(sp, yl)?
            }
        };
        let loss = g.mean(per);
        let lv = g.value(loss).item()?;
        guard.check(step, lv)?;
        losses.push(lv);
        g.backward(loss)?;
        opt.step(net.params_mut(), &ParamSet::grads(&g, &bound));
    }
    Ok((Predictor::new(net, mode), losses))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or the lengths disagree.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Held-out rank correlation between predictions and labels.
pub fn evaluate_predictor(
    predictor: &dyn Scorer,
    images: &[Tensor],
    labels: &[f64],
) -> Result<Option<f64>> {
    let refs: Vec<&Tensor> = images.iter().collect();
    let pred = predictor.score_many(&refs)?;
    Ok(spearman(&pred, labels))
}
