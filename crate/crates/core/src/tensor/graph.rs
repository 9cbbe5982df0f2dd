use super::linalg::{col2im_add, gemm, im2col, ConvGeom, MatRef};
use super::{Tensor, EPS_STAT};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Square,
    Sqrt,
    Softplus,
    Tanh,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Offset(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    SliceLast(Var, usize, usize),
    Conv2d(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node list is already a topological order and backward is a reverse scan.
///
/// A graph is single-threaded; build one per chain or training step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A differentiable input (parameter or latent variable).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    /// Accumulated gradient of a leaf; zeros if backward never reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match &self.leaf_grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(va.shape(), vb.shape())?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<f64> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (mut ia, mut ib) = (Cursor::new(&out_shape, va.shape()), Cursor::new(&out_shape, vb.shape()));
            let (da, db) = (va.data(), vb.data());
            let n: usize = out_shape.iter().product();
            (0..n).map(|_| f(da[ia.next()], db[ib.next()])).collect()
        };
        if let Binary::Div = kind {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("division produced a non-finite value".into()));
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Binary(kind, a, b),
            tracked,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f = |x: f64| match kind {
            Unary::Neg => -x,
            Unary::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Softplus => softplus(x),
            Unary::Tanh => x.tanh(),
        };
        let value = self.value(a).map(f);
        let tracked = self.tracked(a);
        self.push(value, Op::Unary(kind, a), tracked)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(Unary::Log, a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("sqrt of non-positive value {bad}")));
        }
        Ok(self.unary(Unary::Sqrt, a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    /// `ln sigmoid(x) = -softplus(-x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        let sp = self.softplus(n);
        self.neg(sp)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, factor), tracked)
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Var {
        let value = self.value(a).map(|x| x + shift);
        let tracked = self.tracked(a);
        self.push(value, Op::Offset(a), tracked)
    }

    /// Clamps into `[low, high]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, a: Var, low: f64, high: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(low, high));
        let tracked = self.tracked(a);
        self.push(value, Op::Clamp(a, low, high), tracked)
    }

    // ----- linear algebra ---------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`; a rank-1 right operand `[k]` gives `[m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = match *va.shape() {
            [m, k] => (m, k),
            _ => {
                return Err(Error::Dimension(format!(
                    "matmul lhs must be rank 2, got {:?}",
                    va.shape()
                )))
            }
        };
        let (kb, n, out_shape) = match *vb.shape() {
            [kb, n] => (kb, n, vec![m, n]),
            [kb] => (kb, 1, vec![m]),
            _ => {
                return Err(Error::Dimension(format!(
                    "matmul rhs must be rank 1 or 2, got {:?}",
                    vb.shape()
                )))
            }
        };
        if k != kb {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(va.data(), m, k),
            MatRef::new(vb.data(), k, n),
            &mut out,
            false,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MatMul(a, b),
            tracked,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = match *va.shape() {
            [r, c] => (r, c),
            _ => {
                return Err(Error::Dimension(format!(
                    "transpose needs rank 2, got {:?}",
                    va.shape()
                )))
            }
        };
        let d = va.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor::from_parts(vec![c, r], out),
            Op::Transpose(a),
            tracked,
        ))
    }

    // ----- reductions and reshaping -----------------------------------

    /// Sum of all entries as a zero-dimensional tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, keeping it as a length-one dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let d = va.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::SumAxis(a, axis),
            tracked,
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(a).get(axis).ok_or_else(|| {
            Error::Dimension(format!("axis {axis} out of range"))
        })?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Reshape(a), tracked))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape();
        let last = *shape
            .last()
            .ok_or_else(|| Error::Dimension("cannot slice a scalar".into()))?;
        if start >= end || end > last {
            return Err(Error::Dimension(format!(
                "slice {start}..{end} out of range for last axis {last}"
            )));
        }
        let rows = va.numel() / last;
        let width = end - start;
        let d = va.data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&d[r * last + start..r * last + end]);
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = width;
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::SliceLast(a, start, end),
            tracked,
        ))
    }

    // ----- image ops ----------------------------------------------------

    /// Same-padded stride-1 cross-correlation.
    ///
    /// `x` is `[C_in,H,W]` or `[N,C_in,H,W]`; `kernels` is `[C_out,C_in,k,k]`
    /// with odd `k`.
    pub fn conv2d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(kernels));
        let (n, geom) = conv_geometry(vx.shape(), vw.shape())?;
        let c_out = vw.shape()[0];
        let hw = geom.col_cols();
        let in_size = geom.channels * hw;
        let mut out = vec![0.0; n * c_out * hw];
        with_scratch(geom.col_rows() * hw, |cols, _| {
            for s in 0..n {
                im2col(&vx.data()[s * in_size..(s + 1) * in_size], geom, cols);
                gemm(
                    MatRef::new(vw.data(), c_out, geom.col_rows()),
                    MatRef::new(cols, geom.col_rows(), hw),
                    &mut out[s * c_out * hw..(s + 1) * c_out * hw],
                    false,
                );
            }
        });
        let mut out_shape = vx.shape().to_vec();
        let rank = out_shape.len();
        out_shape[rank - 3] = c_out;
        let tracked = self.tracked(x) || self.tracked(kernels);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Conv2d(x, kernels),
            tracked,
        ))
    }

    /// 2x2 average pooling over the last two axes (both must be even).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (planes, h, w) = image_planes(vx.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "avg_pool2 needs even spatial size, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let d = vx.data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &d[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out[(p * oh + y) * ow + xx] =
                        0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AvgPool2(x), tracked))
    }

    /// Nearest-neighbour 2x up-sampling over the last two axes.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (planes, h, w) = image_planes(vx.shape())?;
        let (oh, ow) = (2 * h, 2 * w);
        let d = vx.data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = d[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Upsample2(x), tracked))
    }

    /// Per-channel spatial mean and standard deviation.
    ///
    /// For `[C,H,W]` input both outputs are `[C]`; for `[N,C,H,W]` they are
    /// `[N,C]`. The deviation is `sqrt(population variance + EPS_STAT)`.
    pub fn channel_stats(&mut self, x: Var) -> Result<(Var, Var)> {
        let shape = self.shape(x).to_vec();
        let (lead, h, w) = match shape.len() {
            3 | 4 => {
                let r = shape.len();
                (shape[..r - 2].to_vec(), shape[r - 2], shape[r - 1])
            }
            _ => {
                return Err(Error::Dimension(format!(
                    "channel_stats needs [C,H,W] or [N,C,H,W], got {shape:?}"
                )))
            }
        };
        let mut flat_shape = lead.clone();
        flat_shape.push(h * w);
        let axis = flat_shape.len() - 1;
        let flat = self.reshape(x, &flat_shape)?;
        let mu = self.mean_axis(flat, axis)?;
        let centered = self.sub(flat, mu)?;
        let sq = self.square(centered);
        let var = self.mean_axis(sq, axis)?;
        let var = self.offset(var, EPS_STAT);
        let sigma = self.sqrt(var)?;
        let mu = self.reshape(mu, &lead)?;
        let sigma = self.reshape(sigma, &lead)?;
        Ok((mu, sigma))
    }

    /// Per-channel normalisation `(x - mu) / sigma` broadcast back over space.
    pub fn instance_normalize(&mut self, x: Var) -> Result<Var> {
        let (mu, sigma) = self.channel_stats(x)?;
        let mu = self.expand_spatial(mu)?;
        let sigma = self.expand_spatial(sigma)?;
        let centered = self.sub(x, mu)?;
        self.div(centered, sigma)
    }

    /// Appends two unit axes so a `[.., C]` statistic broadcasts over `H x W`.
    pub fn expand_spatial(&mut self, stat: Var) -> Result<Var> {
        let mut shape = self.shape(stat).to_vec();
        shape.extend([1, 1]);
        self.reshape(stat, &shape)
    }

    // ----- backward -----------------------------------------------------

    /// Accumulates `d loss / d leaf` into every tracked leaf.
    ///
    /// Repeated calls add to the stored gradients until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.tracked(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            match node.op {
                Op::Leaf => match &mut self.leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                },
                Op::Constant => {}
                _ => self.propagate(id, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (da, db) = (va.data(), vb.data());
                if self.tracked(a) {
                    let mut ga = vec![0.0; va.numel()];
                    let (mut ia, mut ib) = (Cursor::new(out.shape(), va.shape()), Cursor::new(out.shape(), vb.shape()));
                    for &gi in g {
                        let (i, j) = (ia.next(), ib.next());
                        ga[i] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * db[j],
                            Binary::Div => gi / db[j],
                        };
                    }
                    accumulate(grads, a, ga);
                }
                if self.tracked(b) {
                    let mut gb = vec![0.0; vb.numel()];
                    let (mut ia, mut ib) = (Cursor::new(out.shape(), va.shape()), Cursor::new(out.shape(), vb.shape()));
                    for &gi in g {
                        let (i, j) = (ia.next(), ib.next());
                        gb[j] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * da[i],
                            Binary::Div => -gi * da[i] / (db[j] * db[j]),
                        };
                    }
                    accumulate(grads, b, gb);
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(a).data();
                let y = out.data();
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        gi * match kind {
                            Unary::Neg => -1.0,
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / x[i],
                            Unary::Square => 2.0 * x[i],
                            Unary::Sqrt => 0.5 / y[i],
                            Unary::Softplus => sigmoid(x[i]),
                            Unary::Tanh => 1.0 - y[i] * y[i],
                        }
                    })
                    .collect();
                accumulate(grads, a, ga);
            }
            Op::Scale(a, f) => accumulate(grads, a, g.iter().map(|v| v * f).collect()),
            Op::Offset(a) | Op::Reshape(a) => accumulate(grads, a, g.to_vec()),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi >= lo && xi <= hi { gi } else { 0.0 })
                    .collect();
                accumulate(grads, a, ga);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.numel() / k;
                let gm = MatRef::new(g, m, n);
                if self.tracked(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(gm, MatRef::new(vb.data(), k, n).t(), &mut ga, false);
                    accumulate(grads, a, ga);
                }
                if self.tracked(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(MatRef::new(va.data(), m, k).t(), gm, &mut gb, false);
                    accumulate(grads, b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g[i * c + j];
                    }
                }
                accumulate(grads, a, ga);
            }
            Op::Sum(a) => {
                let n = self.value(a).numel();
                accumulate(grads, a, vec![g[0]; n]);
            }
            Op::SumAxis(a, axis) => {
                let va = self.value(a);
                let (outer, len, inner) = split_axis(va.shape(), axis);
                let mut ga = vec![0.0; va.numel()];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        ga[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(src);
                    }
                }
                accumulate(grads, a, ga);
            }
            Op::SliceLast(a, start, end) => {
                let va = self.value(a);
                let last = *va.shape().last().unwrap();
                let width = end - start;
                let rows = va.numel() / last;
                let mut ga = vec![0.0; va.numel()];
                for r in 0..rows {
                    ga[r * last + start..r * last + end]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                accumulate(grads, a, ga);
            }
            Op::Conv2d(x, w) => {
                let (vx, vw) = (self.value(x), self.value(w));
                let (n, geom) = conv_geometry(vx.shape(), vw.shape())
                    .expect("conv geometry validated in forward");
                let c_out = vw.shape()[0];
                let hw = geom.col_cols();
                let rows = geom.col_rows();
                let in_size = geom.channels * hw;
                let mut gw = self.tracked(w).then(|| vec![0.0; vw.numel()]);
                let mut gx = self.tracked(x).then(|| vec![0.0; vx.numel()]);
                with_scratch(rows * hw, |cols, dcols| {
                    for s in 0..n {
                        let gs = MatRef::new(&g[s * c_out * hw..(s + 1) * c_out * hw], c_out, hw);
                        if let Some(gw) = gw.as_mut() {
                            im2col(&vx.data()[s * in_size..(s + 1) * in_size], geom, cols);
                            gemm(gs, MatRef::new(cols, rows, hw).t(), gw, true);
                        }
                        if let Some(gx) = gx.as_mut() {
                            gemm(MatRef::new(vw.data(), c_out, rows).t(), gs, dcols, false);
                            col2im_add(dcols, geom, &mut gx[s * in_size..(s + 1) * in_size]);
                        }
                    }
                });
                if let Some(gx) = gx {
                    accumulate(grads, x, gx);
                }
                if let Some(gw) = gw {
                    accumulate(grads, w, gw);
                }
            }
            Op::AvgPool2(a) => {
                let va = self.value(a);
                let (planes, h, w) = image_planes(va.shape()).unwrap();
                let (oh, ow) = (h / 2, w / 2);
                let mut ga = vec![0.0; va.numel()];
                for p in 0..planes {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = 0.25 * g[(p * oh + y) * ow + xx];
                            let i = p * h * w + 2 * y * w + 2 * xx;
                            ga[i] += v;
                            ga[i + 1] += v;
                            ga[i + w] += v;
                            ga[i + w + 1] += v;
                        }
                    }
                }
                accumulate(grads, a, ga);
            }
            Op::Upsample2(a) => {
                let va = self.value(a);
                let (planes, h, w) = image_planes(va.shape()).unwrap();
                let (oh, ow) = (2 * h, 2 * w);
                let mut ga = vec![0.0; va.numel()];
                for p in 0..planes {
                    for y in 0..oh {
                        for xx in 0..ow {
                            ga[(p * h + y / 2) * w + xx / 2] += g[(p * oh + y) * ow + xx];
                        }
                    }
                }
                accumulate(grads, a, ga);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Dimension(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Walks the flat input indices of a broadcast operand in output order.
/// Operands whose non-unit axes form one contiguous block (scalars, biases,
/// per-channel statistics) are walked with counters; anything else falls back
/// to a precomputed index map.
enum Cursor {
    Block { inner: usize, len: usize, count: usize, idx: usize },
    Map { map: Vec<usize>, pos: usize },
}

impl Cursor {
    fn new(out_shape: &[usize], in_shape: &[usize]) -> Cursor {
        let offset = out_shape.len() - in_shape.len();
        let axes: Vec<usize> = (0..in_shape.len()).filter(|&i| in_shape[i] != 1).collect();
        let contiguous = axes.windows(2).all(|w| w[1] == w[0] + 1);
        if contiguous {
            let last = axes.last().map_or(out_shape.len(), |&i| i + offset + 1);
            let inner = out_shape[last..].iter().product();
            let len = in_shape.iter().product();
            return Cursor::Block { inner, len, count: 0, idx: 0 };
        }
        Cursor::Map { map: broadcast_map(out_shape, in_shape), pos: 0 }
    }

    #[inline]
    fn next(&mut self) -> usize {
        match self {
            Cursor::Block { inner, len, count, idx } => {
                let out = *idx;
                *count += 1;
                if *count == *inner {
                    *count = 0;
                    *idx += 1;
                    if *idx == *len {
                        *idx = 0;
                    }
                }
                out
            }
            Cursor::Map { map, pos } => {
                *pos += 1;
                map[*pos - 1]
            }
        }
    }
}

/// For each flat index of `out_shape`, the flat index into the broadcast
/// input of shape `in_shape`.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { stride };
        stride *= in_shape[i];
    }
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..numel {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += in_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= in_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = Default::default();
}

/// Two per-thread buffers of length `n` for patch matrices. Contents are
/// stale; callers overwrite them completely before reading.
fn with_scratch<R>(n: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut bufs = cell.borrow_mut();
        let (a, b) = &mut *bufs;
        if a.len() < n {
            a.resize(n, 0.0);
            b.resize(n, 0.0);
        }
        f(&mut a[..n], &mut b[..n])
    })
}

fn image_planes(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(Error::Dimension(format!(
            "expected an image tensor [.., H, W], got {shape:?}"
        )));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

fn conv_geometry(x: &[usize], w: &[usize]) -> Result<(usize, ConvGeom)> {
    let (n, c, h, wd) = match *x {
        [c, h, wd] => (1, c, h, wd),
        [n, c, h, wd] => (n, c, h, wd),
        _ => {
            return Err(Error::Dimension(format!(
                "conv2d input must be [C,H,W] or [N,C,H,W], got {x:?}"
            )))
        }
    };
    let [_, c_in, k, k2] = *w else {
        return Err(Error::Dimension(format!(
            "conv2d kernels must be [C_out,C_in,k,k], got {w:?}"
        )));
    };
    if c_in != c {
        return Err(Error::Dimension(format!(
            "conv2d channel mismatch: input has {c}, kernels expect {c_in}"
        )));
    }
    if k != k2 || k % 2 == 0 {
        return Err(Error::Dimension(format!(
            "conv2d kernels must be square with odd size, got {k}x{k2}"
        )));
    }
    Ok((
        n,
        ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[4, 1, 1], &[4, 2, 2]).unwrap(), vec![4, 2, 2]);
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
        assert_eq!(broadcast_map(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_map(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.constant(Tensor::vector(&[0.3, -1.7]));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -1.7]);
    }

    #[test]
    fn hand_matmul() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 1]);
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[-3.0, 0.0, 3.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[1], 0.5);
    }

    #[test]
    fn log_and_sqrt_domain() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
        assert!(matches!(g.sqrt(x), Err(Error::Domain(_))));
        let neg = g.constant(Tensor::vector(&[-1.0]));
        assert!(g.log(neg).is_err());
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        g.backward(s).unwrap();
        assert!((g.grad(x).item().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let r = g.relu(x);
        g.backward(r).unwrap();
        assert_eq!(g.grad(x).item().unwrap(), 0.0);
    }

    #[test]
    fn sum_gives_ones_and_half_norm_gives_identity() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::vector(&[0.5, -2.0, 4.0]));
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(z).data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let z = g.leaf(Tensor::vector(&[0.5, -2.0, 4.0]));
        let sq = g.square(z);
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        g.backward(half).unwrap();
        assert_eq!(g.grad(z).data(), &[0.5, -2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::vector(&[1.0, 2.0]));
        let s = g.sum(z);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(z).data(), &[2.0, 2.0]);
        g.zero_grad();
        assert_eq!(g.grad(z).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(z), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_has_zero_grad() {
        let mut g = Graph::new();
        let used = g.leaf(Tensor::vector(&[1.0]));
        let unused = g.leaf(Tensor::vector(&[5.0, 6.0]));
        let s = g.sum(used);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn channel_stats_hand_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0]));
        let (mu, sigma) = g.channel_stats(x).unwrap();
        assert_eq!(g.value(mu).data(), &[2.5, 5.0]);
        let s = g.value(sigma).data();
        assert!((s[0] - (1.25f64 + EPS_STAT).sqrt()).abs() < 1e-15);
        assert!((s[0] - 1.1180).abs() < 1e-4);
        assert!((s[1] - EPS_STAT.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let img = Tensor::uniform(&[1, 4, 5], 0.0, 1.0, &mut rand::rng());
        let x = g.constant(img.clone());
        let k = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = g.conv2d(x, k).unwrap();
        assert!(g.value(y).bit_eq(&img));
    }

    #[test]
    fn averaging_kernel_on_constant_image() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4, 4], 2.0));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = g.conv2d(x, k).unwrap();
        let out = g.value(y).data();
        // interior pixel sees 9 values, an edge pixel 6, a corner 4
        assert!((out[5] - 2.0).abs() < 1e-14);
        assert!((out[1] - 2.0 * 6.0 / 9.0).abs() < 1e-14);
        assert!((out[0] - 2.0 * 4.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, k), Err(Error::Dimension(_))));
    }

    #[test]
    fn pool_then_upsample_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 8, 6]));
        let p = g.avg_pool2(x).unwrap();
        assert_eq!(g.shape(p), &[2, 3, 4, 3]);
        let u = g.upsample2(p).unwrap();
        assert_eq!(g.shape(u), &[2, 3, 8, 6]);
        let odd = g.constant(Tensor::zeros(&[1, 3, 3]));
        assert!(g.avg_pool2(odd).is_err());
    }

    #[test]
    fn clamp_gradient_vanishes_outside() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(&[-0.5, 0.5, 1.5]));
        let c = g.clamp(a, 0.0, 1.0);
        assert_eq!(g.value(c).data(), &[0.0, 0.5, 1.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).data(), &[0.0, 1.0, 0.0]);
    }
}
