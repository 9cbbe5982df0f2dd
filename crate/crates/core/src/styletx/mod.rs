//! AdaIN stylization: `Z(I, s)`, the interpolated `Z^(I, s, alpha)` and
//! decoder training.

mod train;

use crate::error::{Error, Result};
use crate::nets::{encode_style, Codec, Network, StyleVector};
use crate::tensor::{Graph, Tensor, Var};

pub(crate) use train::stack;
pub use train::{
    train_autoencoder, train_transfer, AutoencoderConfig, TrainReport, TransferLossConfig,
};

/// Aligns per-channel statistics of `content` (`[C,H,W]` or `[N,C,H,W]`) to
/// `mu_s`/`sigma_s` (`[C]` or `[N,C]`): `sigma_s * (x - mu(x)) / sigma(x) + mu_s`.
pub fn adain(g: &mut Graph, content: Var, mu_s: Var, sigma_s: Var) -> Result<Var> {
    if let Some(bad) = g.value(sigma_s).data().iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Domain(format!(
            "style sigma must be strictly positive, got {bad}"
        )));
    }
    // Affine form x * a + b with a = sigma_s / sigma(x), b = mu_s - mu(x) * a.
    // When the style is the content's own, a is exactly 1 and b exactly 0.
    let (mu_c, sigma_c) = g.channel_stats(content)?;
    let a = g.div(sigma_s, sigma_c)?;
    let shift = g.mul(mu_c, a)?;
    let b = g.sub(mu_s, shift)?;
    let a = g.expand_spatial(a)?;
    let b = g.expand_spatial(b)?;
    let scaled = g.mul(content, a)?;
    g.add(scaled, b)
}

/// `alpha * features + (1 - alpha) * target`, exact at both endpoints.
pub fn interpolate_features(g: &mut Graph, features: Var, target: Var, alpha: Var) -> Result<Var> {
    let one_minus = {
        let neg = g.neg(alpha);
        g.offset(neg, 1.0)
    };
    let a = g.mul(features, alpha)?;
    let b = g.mul(target, one_minus)?;
    g.add(a, b)
}

/// Eager AdaIN on plain tensors.
pub fn adain_tensor(content: &Tensor, style: &StyleVector) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(content.clone());
    let mu = g.constant(style.mu().clone());
    let sigma = g.constant(style.sigma().clone());
    let t = adain(&mut g, x, mu, sigma)?;
    Ok(g.value(t).clone())
}

/// Where the style of a stylization comes from.
#[derive(Clone, Copy, Debug)]
pub enum StyleSource<'a> {
    Vector(&'a StyleVector),
    Image(&'a Tensor),
}

/// A content image with its encoded features, reused across many stylizations.
#[derive(Clone, Debug)]
pub struct ContentFeatures {
    pub image: Tensor,
    pub features: Tensor,
}

impl ContentFeatures {
    pub fn new(codec: &Codec, image: &Tensor) -> Result<Self> {
        Ok(Self {
            image: image.clone(),
            features: codec.encoder.encode(image)?,
        })
    }
}

/// Frozen encoder/decoder pair applying styles to images.
#[derive(Clone, Debug)]
pub struct Stylizer {
    codec: Codec,
}

impl Stylizer {
    pub fn new(codec: Codec) -> Self {
        Self { codec }
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn content(&self, image: &Tensor) -> Result<ContentFeatures> {
        ContentFeatures::new(&self.codec, image)
    }

    fn resolve(&self, source: StyleSource<'_>) -> Result<StyleVector> {
        match source {
            StyleSource::Vector(s) => Ok(s.clone()),
            StyleSource::Image(img) => encode_style(img, &self.codec.encoder),
        }
    }

    /// Pre-decoder feature map `alpha f_E(I) + (1 - alpha) t`; `alpha = None`
    /// means full stylization (`t` itself).
    pub fn target_features(
        &self,
        content: &ContentFeatures,
        style: &StyleVector,
        alpha: Option<f64>,
    ) -> Result<Tensor> {
        if let Some(a) = alpha {
            check_alpha(a)?;
        }
        let mut g = Graph::new();
        let f = g.constant(content.features.clone());
        let mu = g.constant(style.mu().clone());
        let sigma = g.constant(style.sigma().clone());
        let mut t = adain(&mut g, f, mu, sigma)?;
        if let Some(a) = alpha {
            let av = g.constant(Tensor::scalar(a));
            t = interpolate_features(&mut g, f, t, av)?;
        }
        Ok(g.value(t).clone())
    }

    /// `Z(I, s) = f_D(sigma_s nu(f_E(I)) + mu_s)`.
    pub fn stylize(&self, content: &ContentFeatures, style: &StyleVector) -> Result<Tensor> {
        self.codec.decoder.decode(&self.target_features(content, style, None)?)
    }

    /// `Z^(I, s, alpha) = f_D(alpha f_E(I) + (1 - alpha) t)` with `alpha` in `[0, 1]`.
    pub fn stylize_alpha(
        &self,
        content: &ContentFeatures,
        style: StyleSource<'_>,
        alpha: f64,
    ) -> Result<Tensor> {
        check_alpha(alpha)?;
        let style = self.resolve(style)?;
        self.codec
            .decoder
            .decode(&self.target_features(content, &style, Some(alpha))?)
    }

    /// `f_D(f_E(I))`.
    pub fn reconstruct(&self, content: &ContentFeatures) -> Result<Tensor> {
        self.codec.decoder.decode(&content.features)
    }

    /// Image node for stylizing `features` with graph-valued style statistics.
    /// Decoder parameters are bound as constants.
    pub fn stylize_graph(
        &self,
        g: &mut Graph,
        features: Var,
        mu: Var,
        sigma: Var,
        alpha: Option<Var>,
    ) -> Result<Var> {
        let mut t = adain(g, features, mu, sigma)?;
        if let Some(a) = alpha {
            t = interpolate_features(g, features, t, a)?;
        }
        let bound = self.codec.decoder.params().bind(g, false);
        self.codec.decoder.forward(g, &bound, t)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!(
            "stylization strength alpha must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(())
}
