use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{he_uniform, meta_tensor, meta_values, Network, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Graph, Tensor, Var};

/// Attribute predictor backbone: `conv+relu+pool` per channel step, then two
/// fully connected layers ending in one raw output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
    pub image_size: usize,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self {
            channels: vec![3, 8, 8],
            kernel: 3,
            hidden: 32,
            image_size: 16,
        }
    }
}

impl PredictorSpec {
    fn validate(&self) -> Result<()> {
        let convs = self.channels.len().saturating_sub(1);
        if convs == 0 || self.channels.contains(&0) || self.hidden == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("invalid predictor spec {self:?}")));
        }
        if self.image_size >> convs == 0 || (self.image_size >> convs) << convs != self.image_size {
            return Err(Error::Config(format!(
                "image size {} cannot be pooled {convs} times",
                self.image_size
            )));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        let convs = self.channels.len() - 1;
        let side = self.image_size >> convs;
        self.channels[convs] * side * side
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorNet {
    spec: PredictorSpec,
    params: ParamSet,
}

impl PredictorNet {
    pub fn new<R: Rng + ?Sized>(spec: PredictorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let k = spec.kernel;
        for (i, w) in spec.channels.windows(2).enumerate() {
            params.push(format!("k{i}"), he_uniform(&[w[1], w[0], k, k], w[0] * k * k, rng));
            params.push(format!("b{i}"), Tensor::zeros(&[w[1], 1, 1]));
        }
        let flat = spec.flat_dim();
        params.push("fc0.w", he_uniform(&[flat, spec.hidden], flat, rng));
        params.push("fc0.b", Tensor::zeros(&[spec.hidden]));
        params.push("fc1.w", he_uniform(&[spec.hidden, 1], spec.hidden, rng));
        params.push("fc1.b", Tensor::zeros(&[1]));
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &PredictorSpec {
        &self.spec
    }

    /// Raw output for `[3,H,W]` (shape `[1,1]`) or `[N,3,H,W]` (shape `[N,1]`).
    pub fn forward(&self, g: &mut Graph, bound: &[Var], x: Var) -> Result<Var> {
        let s = self.spec.image_size;
        let c0 = self.spec.channels[0];
        let batch = match *g.shape(x) {
            [c, h, w] if [c, h, w] == [c0, s, s] => 1,
            [n, c, h, w] if [c, h, w] == [c0, s, s] => n,
            ref other => {
                return Err(Error::Dimension(format!(
                    "predictor expects [.., {c0}, {s}, {s}], got {other:?}"
                )))
            }
        };
        let convs = self.spec.channels.len() - 1;
        let mut h = x;
        for i in 0..convs {
            let z = g.conv2d(h, bound[2 * i])?;
            let z = g.add(z, bound[2 * i + 1])?;
            let a = g.relu(z);
            h = g.avg_pool2(a)?;
        }
        let base = 2 * convs;
        let flat = g.reshape(h, &[batch, self.spec.flat_dim()])?;
        let z = g.matmul(flat, bound[base])?;
        let z = g.add(z, bound[base + 1])?;
        let a = g.relu(z);
        let z = g.matmul(a, bound[base + 2])?;
        g.add(z, bound[base + 3])
    }
}

impl Network for PredictorNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.params.to_checkpoint();
        c.insert("meta.channels", meta_tensor(&self.spec.channels));
        c.insert(
            "meta.shape",
            meta_tensor(&[self.spec.kernel, self.spec.hidden, self.spec.image_size]),
        );
        c
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let channels = meta_values(ckpt, "meta.channels")?;
        let [kernel, hidden, image_size] = meta_values(ckpt, "meta.shape")?[..] else {
            return Err(Error::Checkpoint("meta.shape must hold three values".into()));
        };
        let spec = PredictorSpec {
            channels,
            kernel,
            hidden,
            image_size,
        };
        let mut rng = rand::rngs::SmallRng::seed_from_u64(0);
        let mut net = Self::new(spec, &mut rng).map_err(|e| Error::Checkpoint(e.to_string()))?;
        net.params.load(ckpt)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batched_and_single_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = PredictorNet::new(PredictorSpec::default(), &mut rng).unwrap();
        let a = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let mut batch = a.data().to_vec();
        batch.extend_from_slice(b.data());
        let batch = Tensor::new(&[2, 3, 16, 16], batch).unwrap();

        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let bound = net.params().bind(&mut g, false);
            let xv = g.constant(x.clone());
            let y = net.forward(&mut g, &bound, xv).unwrap();
            g.value(y).data().to_vec()
        };
        let both = run(&batch);
        assert!((both[0] - run(&a)[0]).abs() < 1e-12);
        assert!((both[1] - run(&b)[0]).abs() < 1e-12);
    }
}
