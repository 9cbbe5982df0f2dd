use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{he_uniform, meta_tensor, meta_values, Network, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Graph, Tensor, Var};

/// Convolutional encoder/decoder layout.
///
/// The encoder applies `conv(k) + relu` for each consecutive channel pair of
/// `channels`, with a 2x2 average pool between layers. The decoder runs the
/// same layers in reverse with nearest-neighbour up-sampling in place of the
/// pools and a sigmoid on the final layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub image_size: usize,
}

impl Default for CodecSpec {
    fn default() -> Self {
        Self {
            channels: vec![3, 8, 16],
            kernel: 3,
            image_size: 16,
        }
    }
}

impl CodecSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "codec needs at least two positive channel counts, got {:?}",
                self.channels
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("codec kernel size must be odd".into()));
        }
        let pools = self.channels.len() - 2;
        let side = self.image_size >> pools;
        if side << pools != self.image_size || side * side < 4 {
            return Err(Error::Config(format!(
                "image size {} does not leave an even feature map of at least 4 positions",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    pub fn image_channels(&self) -> usize {
        self.channels[0]
    }

    pub fn feature_side(&self) -> usize {
        self.image_size >> (self.channels.len() - 2)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels(), self.image_size, self.image_size]
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        let s = self.feature_side();
        [self.feature_channels(), s, s]
    }

    fn reversed(&self) -> Vec<usize> {
        self.channels.iter().rev().copied().collect()
    }
}

fn conv_params<R: Rng + ?Sized>(channels: &[usize], k: usize, rng: &mut R) -> ParamSet {
    let mut p = ParamSet::new();
    for (i, w) in channels.windows(2).enumerate() {
        let (cin, cout) = (w[0], w[1]);
        p.push(format!("k{i}"), he_uniform(&[cout, cin, k, k], cin * k * k, rng));
        p.push(format!("b{i}"), Tensor::zeros(&[cout, 1, 1]));
    }
    p
}

fn conv_layer(g: &mut Graph, bound: &[Var], i: usize, x: Var) -> Result<Var> {
    let y = g.conv2d(x, bound[2 * i])?;
    g.add(y, bound[2 * i + 1])
}

fn check_input(g: &Graph, x: Var, expect: [usize; 3], what: &str) -> Result<()> {
    let s = g.shape(x);
    let tail = &s[s.len().saturating_sub(3)..];
    if !(s.len() == 3 || s.len() == 4) || tail != expect {
        return Err(Error::Dimension(format!(
            "{what} expects [.., {}, {}, {}], got {s:?}",
            expect[0], expect[1], expect[2]
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    spec: CodecSpec,
    params: ParamSet,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(spec: CodecSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = conv_params(&spec.channels, spec.kernel, rng);
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    /// Activation after every conv layer; the last one is the feature map.
    pub fn forward_stages(&self, g: &mut Graph, bound: &[Var], x: Var) -> Result<Vec<Var>> {
        check_input(g, x, self.spec.image_shape(), "encoder")?;
        let layers = self.spec.channels.len() - 1;
        let mut stages = Vec::with_capacity(layers);
        let mut h = x;
        for i in 0..layers {
            if i > 0 {
                h = g.avg_pool2(h)?;
            }
            let z = conv_layer(g, bound, i, h)?;
            h = g.relu(z);
            stages.push(h);
        }
        Ok(stages)
    }

    pub fn forward(&self, g: &mut Graph, bound: &[Var], x: Var) -> Result<Var> {
        Ok(*self.forward_stages(g, bound, x)?.last().unwrap())
    }

    /// Feature map of one image, computed without gradient tracking.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let f = self.forward(&mut g, &b, x)?;
        Ok(g.value(f).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    spec: CodecSpec,
    params: ParamSet,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(spec: CodecSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = conv_params(&spec.reversed(), spec.kernel, rng);
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    pub fn forward(&self, g: &mut Graph, bound: &[Var], t: Var) -> Result<Var> {
        check_input(g, t, self.spec.feature_shape(), "decoder")?;
        let layers = self.spec.channels.len() - 1;
        let mut h = t;
        for i in 0..layers {
            if i > 0 {
                h = g.upsample2(h)?;
            }
            let z = conv_layer(g, bound, i, h)?;
            h = if i + 1 == layers { g.sigmoid(z) } else { g.relu(z) };
        }
        Ok(h)
    }

    pub fn decode(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let t = g.constant(features.clone());
        let y = self.forward(&mut g, &b, t)?;
        Ok(g.value(y).clone())
    }
}

fn spec_to_checkpoint(spec: &CodecSpec, c: &mut Checkpoint) {
    c.insert("meta.channels", meta_tensor(&spec.channels));
    c.insert("meta.kernel", meta_tensor(&[spec.kernel]));
    c.insert("meta.image_size", meta_tensor(&[spec.image_size]));
}

fn spec_from_checkpoint(c: &Checkpoint) -> Result<CodecSpec> {
    let scalar = |name: &str| -> Result<usize> {
        meta_values(c, name)?
            .first()
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("empty {name}")))
    };
    let spec = CodecSpec {
        channels: meta_values(c, "meta.channels")?,
        kernel: scalar("meta.kernel")?,
        image_size: scalar("meta.image_size")?,
    };
    spec.validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(spec)
}

macro_rules! codec_network {
    ($ty:ident, $channels:expr) => {
        impl Network for $ty {
            fn params(&self) -> &ParamSet {
                &self.params
            }

            fn params_mut(&mut self) -> &mut ParamSet {
                &mut self.params
            }

            fn to_checkpoint(&self) -> Checkpoint {
                let mut c = self.params.to_checkpoint();
                spec_to_checkpoint(&self.spec, &mut c);
                c
            }

            fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
                let spec = spec_from_checkpoint(ckpt)?;
                let channels: fn(&CodecSpec) -> Vec<usize> = $channels;
                let mut net = Self {
                    params: zero_conv_params(&channels(&spec), spec.kernel),
                    spec,
                };
                net.params.load(ckpt)?;
                Ok(net)
            }
        }
    };
}

fn zero_conv_params(channels: &[usize], k: usize) -> ParamSet {
    let mut p = ParamSet::new();
    for (i, w) in channels.windows(2).enumerate() {
        p.push(format!("k{i}"), Tensor::zeros(&[w[1], w[0], k, k]));
        p.push(format!("b{i}"), Tensor::zeros(&[w[1], 1, 1]));
    }
    p
}

codec_network!(Encoder, |s| s.channels.clone());
codec_network!(Decoder, |s| s.reversed());

/// Encoder and decoder trained together.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Codec {
    pub fn new<R: Rng + ?Sized>(spec: CodecSpec, rng: &mut R) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(spec.clone(), rng)?,
            decoder: Decoder::new(spec, rng)?,
        })
    }

    pub fn spec(&self) -> &CodecSpec {
        self.encoder.spec()
    }

    /// `f_D(f_E(I))`.
    pub fn reconstruct(&self, image: &Tensor) -> Result<Tensor> {
        self.decoder.decode(&self.encoder.encode(image)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.extend_prefixed("encoder.", &self.encoder.to_checkpoint());
        c.extend_prefixed("decoder.", &self.decoder.to_checkpoint());
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::from_checkpoint(&ckpt.with_prefix("encoder."))?,
            decoder: Decoder::from_checkpoint(&ckpt.with_prefix("decoder."))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_shapes() {
        let spec = CodecSpec::default();
        assert_eq!(spec.feature_shape(), [16, 8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let codec = Codec::new(spec, &mut rng).unwrap();
        let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let f = codec.encoder.encode(&img).unwrap();
        assert_eq!(f.shape(), &[16, 8, 8]);
        let out = codec.decoder.decode(&f).unwrap();
        assert_eq!(out.shape(), &[3, 16, 16]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn decoder_mirrors_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let codec = Codec::new(CodecSpec::default(), &mut rng).unwrap();
        let enc: Vec<_> = codec.encoder.params().values().iter().map(|t| t.shape().to_vec()).collect();
        let dec: Vec<_> = codec.decoder.params().values().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(enc[0], vec![8, 3, 3, 3]);
        assert_eq!(dec[0], vec![8, 16, 3, 3]);
        assert_eq!(dec[2], vec![3, 8, 3, 3]);
    }

    #[test]
    fn rejects_tiny_feature_maps() {
        let spec = CodecSpec {
            channels: vec![3, 4, 4, 4],
            kernel: 3,
            image_size: 4,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn encoder_rejects_wrong_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(CodecSpec::default(), &mut rng).unwrap();
        assert!(matches!(
            enc.encode(&Tensor::zeros(&[3, 8, 8])),
            Err(Error::Dimension(_))
        ));
    }
}
