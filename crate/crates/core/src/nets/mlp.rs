use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{he_uniform, meta_tensor, meta_values, Network, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// Fully connected stack: one `(width, activation)` per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layers: Vec<(usize, Activation)>,
}

impl MlpSpec {
    pub fn new(layers: &[(usize, Activation)]) -> Self {
        Self {
            layers: layers.to_vec(),
        }
    }

    /// `FC128(relu) - FC512(relu) - FC(out)`.
    pub fn generator(out_dim: usize) -> Self {
        Self::new(&[
            (128, Activation::Relu),
            (512, Activation::Relu),
            (out_dim, Activation::None),
        ])
    }

    /// `FC512(relu) - FC256(relu) - FC128(relu) - FC1`.
    pub fn critic() -> Self {
        Self::new(&[
            (512, Activation::Relu),
            (256, Activation::Relu),
            (128, Activation::Relu),
            (1, Activation::None),
        ])
    }

    /// Hidden relu layers of the given widths followed by a linear output.
    pub fn relu_stack(hidden: &[usize], out_dim: usize) -> Self {
        let mut layers: Vec<_> = hidden.iter().map(|&w| (w, Activation::Relu)).collect();
        layers.push((out_dim, Activation::None));
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.0)
    }

    /// Weights plus biases for input dimension `in_dim`.
    pub fn param_count(&self, in_dim: usize) -> usize {
        let mut prev = in_dim;
        let mut total = 0;
        for &(w, _) in &self.layers {
            total += prev * w + w;
            prev = w;
        }
        total
    }
}

/// Parameters: `w{i}` of shape `[in, out]` and `b{i}` of shape `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    in_dim: usize,
    params: ParamSet,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeroed(in_dim, spec)?;
        let mut prev = in_dim;
        for (i, &(w, _)) in net.spec.layers.iter().enumerate() {
            net.params.values_mut()[2 * i] = he_uniform(&[prev, w], prev, rng);
            prev = w;
        }
        Ok(net)
    }

    /// All-zero parameters; used when loading.
    fn zeroed(in_dim: usize, spec: MlpSpec) -> Result<Self> {
        if in_dim == 0 || spec.layers.is_empty() || spec.layers.iter().any(|l| l.0 == 0) {
            return Err(Error::Config(format!(
                "invalid MLP: input {in_dim}, layers {:?}",
                spec.layers
            )));
        }
        let mut params = ParamSet::new();
        let mut prev = in_dim;
        for (i, &(w, _)) in spec.layers.iter().enumerate() {
            params.push(format!("w{i}"), Tensor::zeros(&[prev, w]));
            params.push(format!("b{i}"), Tensor::zeros(&[w]));
            prev = w;
        }
        Ok(Self {
            spec,
            in_dim,
            params,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim()
    }

    /// Sets the last layer's weights and bias to zero.
    pub fn zero_last_layer(&mut self) {
        let n = self.params.len();
        for t in &mut self.params.values_mut()[n - 2..] {
            t.data_mut().fill(0.0);
        }
    }

    fn as_batch(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match *g.shape(x) {
            [d] if d == self.in_dim => g.reshape(x, &[1, d]),
            [_, d] if d == self.in_dim => Ok(x),
            ref s => Err(Error::Dimension(format!(
                "MLP expects input width {}, got shape {s:?}",
                self.in_dim
            ))),
        }
    }

    /// `x` is `[in]` or `[B, in]`; the output is always `[B, out]`.
    pub fn forward(&self, g: &mut Graph, bound: &[Var], x: Var) -> Result<Var> {
        let mut h = self.as_batch(g, x)?;
        for (i, &(_, act)) in self.spec.layers.iter().enumerate() {
            let z = g.matmul(h, bound[2 * i])?;
            let z = g.add(z, bound[2 * i + 1])?;
            h = match act {
                Activation::Relu => g.relu(z),
                Activation::None => z,
            };
        }
        Ok(h)
    }

    /// Forward pass plus the input gradient of the summed output, both as
    /// graph nodes.
    ///
    /// The input gradient is built from first-order ops (transposed weights
    /// and constant relu masks), so differentiating a function of it with
    /// respect to the weights needs no second-order machinery. The masks are
    /// piecewise constant, so the construction is exact wherever no
    /// pre-activation sits exactly at zero.
    pub fn forward_with_input_grad(
        &self,
        g: &mut Graph,
        bound: &[Var],
        x: Var,
    ) -> Result<(Var, Var)> {
        let mut h = self.as_batch(g, x)?;
        let mut masks = Vec::with_capacity(self.spec.layers.len());
        for (i, &(_, act)) in self.spec.layers.iter().enumerate() {
            let z = g.matmul(h, bound[2 * i])?;
            let z = g.add(z, bound[2 * i + 1])?;
            h = match act {
                Activation::Relu => {
                    let mask = g.value(z).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    masks.push(Some(mask));
                    g.relu(z)
                }
                Activation::None => {
                    masks.push(None);
                    z
                }
            };
        }
        let batch = g.shape(h)[0];
        let mut delta = g.constant(Tensor::ones(&[batch, self.out_dim()]));
        for i in (0..self.spec.layers.len()).rev() {
            if let Some(mask) = masks[i].take() {
                let m = g.constant(mask);
                delta = g.mul(delta, m)?;
            }
            let wt = g.transpose(bound[2 * i])?;
            delta = g.matmul(delta, wt)?;
        }
        Ok((h, delta))
    }
}

impl Network for Mlp {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.params.to_checkpoint();
        let widths: Vec<usize> = self.spec.layers.iter().map(|l| l.0).collect();
        let relu: Vec<usize> = self
            .spec
            .layers
            .iter()
            .map(|l| usize::from(l.1 == Activation::Relu))
            .collect();
        c.insert("meta.in_dim", meta_tensor(&[self.in_dim]));
        c.insert("meta.widths", meta_tensor(&widths));
        c.insert("meta.relu", meta_tensor(&relu));
        c
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let in_dim = *meta_values(ckpt, "meta.in_dim")?
            .first()
            .ok_or_else(|| Error::Checkpoint("empty meta.in_dim".into()))?;
        let widths = meta_values(ckpt, "meta.widths")?;
        let relu = meta_values(ckpt, "meta.relu")?;
        if widths.len() != relu.len() {
            return Err(Error::Checkpoint("meta.widths / meta.relu length differ".into()));
        }
        let layers: Vec<_> = widths
            .into_iter()
            .zip(relu)
            .map(|(w, r)| (w, if r == 1 { Activation::Relu } else { Activation::None }))
            .collect();
        let mut net = Mlp::zeroed(in_dim, MlpSpec { layers })
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        net.params.load(ckpt)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_param_counts_in_closed_form() {
        // generator 64 -> 128 -> 512 -> 32
        let g = MlpSpec::generator(32);
        assert_eq!(g.param_count(64), 64 * 128 + 128 + 128 * 512 + 512 + 512 * 32 + 32);
        // critic 32 -> 512 -> 256 -> 128 -> 1
        let d = MlpSpec::critic();
        assert_eq!(
            d.param_count(32),
            32 * 512 + 512 + 512 * 256 + 256 + 256 * 128 + 128 + 128 + 1
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(32, d.clone(), &mut rng).unwrap();
        assert_eq!(net.params().scalar_count(), d.param_count(32));
    }

    #[test]
    fn input_grad_matches_autodiff() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(3, MlpSpec::relu_stack(&[7, 5], 1), &mut rng).unwrap();
        let x = Tensor::randn(&[4, 3], &mut rng);

        let mut g = Graph::new();
        let b = net.params().bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (_, grad) = net.forward_with_input_grad(&mut g, &b, xv).unwrap();
        let closed = g.value(grad).clone();

        let mut g = Graph::new();
        let b = net.params().bind(&mut g, false);
        let xv = g.leaf(x);
        let out = net.forward(&mut g, &b, xv).unwrap();
        let s = g.sum(out);
        g.backward(s).unwrap();
        assert!(g.grad(xv).max_abs_diff(&closed) < 1e-12);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(3, MlpSpec::relu_stack(&[4], 1), &mut rng).unwrap();
        let mut g = Graph::new();
        let b = net.params().bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(net.forward(&mut g, &b, x), Err(Error::Dimension(_))));
    }
}
