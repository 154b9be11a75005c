//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, records every operation of
//! a forward pass, and replays the tape backwards once to produce
//! [`Gradients`]. Gradients are applied to the store after the graph is
//! dropped, which keeps parameter mutation out of the forward/backward path.

pub mod kernels;

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{matmul, Real, Tensor};
use kernels::{col2im, im2col, nchw_to_rows, rows_to_nchw, ConvGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
struct ConvAttrs {
    stride: usize,
    pad: usize,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, attrs: ConvAttrs },
    ConvTranspose2d { x: NodeId, w: NodeId, b: NodeId, attrs: ConvAttrs },
    Relu(NodeId),
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SumAll(NodeId),
    SumAxis { x: NodeId, axis: usize },
    LogSumExpAxis { x: NodeId, axis: usize },
    DiagGaussianKl { mu: NodeId, logvar: NodeId },
    BernoulliNll { logits: NodeId, target: Tensor<T> },
    Reparameterize { mu: NodeId, logvar: NodeId, noise: Tensor<T> },
    GaussianLogDensity { z: NodeId, mu: NodeId, logvar: NodeId },
    StdNormalLogDensity(NodeId),
    PairwiseGaussianLogDensity { z: NodeId, mu: NodeId, logvar: NodeId },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Relu(_) => "relu",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SumAll(_) => "sum_all",
            Op::SumAxis { .. } => "sum_axis",
            Op::LogSumExpAxis { .. } => "logsumexp_axis",
            Op::DiagGaussianKl { .. } => "diag_gaussian_kl",
            Op::BernoulliNll { .. } => "bernoulli_nll",
            Op::Reparameterize { .. } => "reparameterize",
            Op::GaussianLogDensity { .. } => "gaussian_log_density",
            Op::StdNormalLogDensity(_) => "std_normal_log_density",
            Op::PairwiseGaussianLogDensity { .. } => "pairwise_gaussian_log_density",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    /// `None` only for parameter leaves, whose value lives in the store.
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn half_log_two_pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

/// Split a shape around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(pid), _) => self.params.value(*pid),
            (_, Some(v)) => v,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).item().as_f64()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            value: Some(value),
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `y = x · wᵀ + b` with `x` flattened to `[n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let n = xv.rows();
        let fan_in = if n == 0 { 0 } else { xv.len() / n };
        if wv.shape().len() != 2 || wv.shape()[1] != fan_in || bv.shape() != [wv.shape()[0]] {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let out = wv.shape()[0];
        let mut y = vec![T::zero(); n * out];
        for row in y.chunks_mut(out) {
            row.copy_from_slice(bv.data());
        }
        matmul(xv.data(), false, wv.data(), true, &mut y, n, fan_in, out, true);
        let y = Tensor::new(vec![n, out], y)?;
        self.push(Op::Linear { x, w, b }, y, &[x, w, b])
    }

    fn conv_geometry(shape: &[usize], kernel: usize, attrs: ConvAttrs) -> Result<ConvGeometry> {
        if shape.len() != 4 {
            return Err(Error::Shape(format!("convolution expects NCHW, got {shape:?}")));
        }
        Ok(ConvGeometry {
            batch: shape[0],
            channels: shape[1],
            height: shape[2],
            width: shape[3],
            kernel,
            stride: attrs.stride,
            pad: attrs.pad,
        })
    }

    /// 2-D convolution, `w: [out, in, k, k]`, `b: [out]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let attrs = ConvAttrs { stride, pad };
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let ws = wv.shape();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d weight {ws:?}")));
        }
        let g = Self::conv_geometry(xv.shape(), ws[2], attrs)?;
        if ws[1] != g.channels || bv.shape() != [ws[0]] || !g.valid() {
            return Err(Error::Shape(format!(
                "conv2d: input {:?}, weight {ws:?}, bias {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let out_c = ws[0];
        let (ho, wo) = (g.out_height(), g.out_width());
        let cols = im2col(xv.data(), &g);
        let positions = g.out_positions();
        let mut rows = vec![T::zero(); positions * out_c];
        for r in rows.chunks_mut(out_c) {
            r.copy_from_slice(bv.data());
        }
        matmul(&cols, false, wv.data(), true, &mut rows, positions, g.patch_len(), out_c, true);
        let y = rows_to_nchw(&rows, g.batch, out_c, ho * wo);
        let y = Tensor::new(vec![g.batch, out_c, ho, wo], y)?;
        self.push(Op::Conv2d { x, w, b, attrs }, y, &[x, w, b])
    }

    /// Transposed 2-D convolution, `w: [in, out, k, k]`, `b: [out]`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let attrs = ConvAttrs { stride, pad };
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let ws = wv.shape();
        let xs = xv.shape();
        if ws.len() != 4 || ws[2] != ws[3] || xs.len() != 4 || ws[0] != xs[1] {
            return Err(Error::Shape(format!("conv_transpose2d: input {xs:?}, weight {ws:?}")));
        }
        let (k, out_c) = (ws[2], ws[1]);
        if bv.shape() != [out_c] {
            return Err(Error::Shape(format!("conv_transpose2d bias {:?}", bv.shape())));
        }
        let ho = (xs[2] - 1) * stride + k;
        let wo = (xs[3] - 1) * stride + k;
        if ho < 2 * pad + 1 || wo < 2 * pad + 1 {
            return Err(Error::Shape("conv_transpose2d output collapses".into()));
        }
        // The output image is the input side of an ordinary convolution whose
        // output grid is `x`'s grid.
        let g = ConvGeometry {
            batch: xs[0],
            channels: out_c,
            height: ho - 2 * pad,
            width: wo - 2 * pad,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!((g.out_height(), g.out_width()), (xs[2], xs[3]));
        let in_c = xs[1];
        let hw = xs[2] * xs[3];
        let x_rows = nchw_to_rows(xv.data(), xs[0], in_c, hw);
        let mut cols = vec![T::zero(); xs[0] * hw * g.patch_len()];
        matmul(&x_rows, false, wv.data(), false, &mut cols, xs[0] * hw, in_c, g.patch_len(), false);
        let mut y = col2im(&cols, &g);
        let plane = g.height * g.width;
        for (i, chunk) in y.chunks_mut(plane).enumerate() {
            let bias = bv.data()[i % out_c];
            chunk.iter_mut().for_each(|v| *v = *v + bias);
        }
        let y = Tensor::new(vec![g.batch, out_c, g.height, g.width], y)?;
        self.push(Op::ConvTranspose2d { x, w, b, attrs }, y, &[x, w, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu(x), y, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), y, &[x])
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let y = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), y, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let y = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), y, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let y = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), y, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let c = T::lit(c);
        let y = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), y, &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let c = T::lit(c);
        let y = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar(x), y, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.value(x).map(|v| v.exp());
        self.push(Op::Exp(x), y, &[x])
    }

    /// `|x|` with the sign subgradient, zero exactly at the kink.
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.value(x).map(|v| v.abs());
        self.push(Op::Abs(x), y, &[x])
    }

    /// Columns `[start, start+len)` of a 2-D node.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Shape(format!("slice_cols {start}+{len} of {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xv.data()[r * c + start..r * c + start + len]);
        }
        let y = Tensor::new(vec![n, len], out)?;
        self.push(Op::SliceCols { x, start }, y, &[x])
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat of nothing".into()));
        }
        let n = self.shape(xs[0])[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != n {
                return Err(Error::Shape(format!("concat_cols row mismatch: {s:?}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let y = Tensor::new(vec![n, total], out)?;
        self.push(Op::ConcatCols(xs.to_vec()), y, xs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll(x), y, &[x])
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            return Err(Error::Shape(format!("sum_axis {axis} of {:?}", xv.shape())));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xv.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let y = Tensor::new(shape, out)?;
        self.push(Op::SumAxis { x, axis }, y, &[x])
    }

    /// Numerically stable `log Σ exp` over one axis, removing it.
    pub fn logsumexp_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            return Err(Error::Shape(format!("logsumexp_axis {axis} of {:?}", xv.shape())));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| d[(o * len + a) * inner + i];
                let m = (0..len).map(at).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|a| (at(a) - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let y = Tensor::new(shape, out)?;
        self.push(Op::LogSumExpAxis { x, axis }, y, &[x])
    }

    /// Elementwise KL of `N(mu, exp(logvar))` from `N(0, 1)`, in nats.
    pub fn diag_gaussian_kl(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
        self.same_shape(mu, logvar, "diag_gaussian_kl")?;
        let half = T::lit(0.5);
        let y = self.zip_with(mu, logvar, |m, lv| half * (m * m + lv.exp() - T::one() - lv));
        self.push(Op::DiagGaussianKl { mu, logvar }, y, &[mu, logvar])
    }

    /// Per-sample Bernoulli negative log-likelihood, summed over all
    /// non-leading axes. `target` must lie in `[0, 1]`.
    pub fn bernoulli_nll(&mut self, logits: NodeId, target: Tensor<T>) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "bernoulli_nll: logits {:?} vs target {:?}",
                lv.shape(),
                target.shape()
            )));
        }
        if target.data().iter().any(|&t| !(t >= T::zero() && t <= T::one())) {
            return Err(Error::InvalidArgument("reconstruction target outside [0,1]".into()));
        }
        let n = lv.rows();
        let per = if n == 0 { 0 } else { lv.len() / n };
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let l = &lv.data()[r * per..(r + 1) * per];
            let t = &target.data()[r * per..(r + 1) * per];
            let s: T = l
                .iter()
                .zip(t)
                .map(|(&l, &t)| l.max(T::zero()) - t * l + (-l.abs()).exp().ln_1p())
                .sum();
            out.push(s);
        }
        let y = Tensor::new(vec![n], out)?;
        self.push(Op::BernoulliNll { logits, target }, y, &[logits])
    }

    /// `z = mu + exp(0.5·logvar) ⊙ noise`
    pub fn reparameterize(&mut self, mu: NodeId, logvar: NodeId, noise: Tensor<T>) -> Result<NodeId> {
        self.same_shape(mu, logvar, "reparameterize")?;
        if noise.shape() != self.shape(mu) {
            return Err(Error::Shape(format!(
                "reparameterize: noise {:?} vs mean {:?}",
                noise.shape(),
                self.shape(mu)
            )));
        }
        let half = T::lit(0.5);
        let (mv, lv) = (self.value(mu), self.value(logvar));
        let data = mv
            .data()
            .iter()
            .zip(lv.data())
            .zip(noise.data())
            .map(|((&m, &l), &e)| m + (half * l).exp() * e)
            .collect();
        let y = Tensor::new(mv.shape().to_vec(), data)?;
        self.push(Op::Reparameterize { mu, logvar, noise }, y, &[mu, logvar])
    }

    /// Elementwise `log N(z; mu, exp(logvar))`.
    pub fn gaussian_log_density(&mut self, z: NodeId, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
        self.same_shape(z, mu, "gaussian_log_density")?;
        self.same_shape(mu, logvar, "gaussian_log_density")?;
        let c = T::lit(half_log_two_pi());
        let half = T::lit(0.5);
        let (zv, mv, lv) = (self.value(z), self.value(mu), self.value(logvar));
        let data = zv
            .data()
            .iter()
            .zip(mv.data())
            .zip(lv.data())
            .map(|((&z, &m), &l)| {
                let d = z - m;
                -c - half * l - half * d * d * (-l).exp()
            })
            .collect();
        let y = Tensor::new(zv.shape().to_vec(), data)?;
        self.push(Op::GaussianLogDensity { z, mu, logvar }, y, &[z, mu, logvar])
    }

    /// Elementwise `log N(z; 0, 1)`.
    pub fn std_normal_log_density(&mut self, z: NodeId) -> Result<NodeId> {
        let c = T::lit(half_log_two_pi());
        let half = T::lit(0.5);
        let y = self.value(z).map(|v| -c - half * v * v);
        self.push(Op::StdNormalLogDensity(z), y, &[z])
    }

    /// `out[i, j, d] = log N(z[i, d]; mu[j, d], exp(logvar[j, d]))` for `[B, D]` inputs.
    pub fn pairwise_gaussian_log_density(
        &mut self,
        z: NodeId,
        mu: NodeId,
        logvar: NodeId,
    ) -> Result<NodeId> {
        self.same_shape(z, mu, "pairwise_gaussian_log_density")?;
        self.same_shape(mu, logvar, "pairwise_gaussian_log_density")?;
        let s = self.shape(z).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("pairwise density expects [B, D], got {s:?}")));
        }
        let (b, d) = (s[0], s[1]);
        let c = T::lit(half_log_two_pi());
        let half = T::lit(0.5);
        let (zv, mv, lv) = (self.value(z).data(), self.value(mu).data(), self.value(logvar).data());
        let mut out = vec![T::zero(); b * b * d];
        for i in 0..b {
            for j in 0..b {
                for k in 0..d {
                    let l = lv[j * d + k];
                    let diff = zv[i * d + k] - mv[j * d + k];
                    out[(i * b + j) * d + k] = -c - half * l - half * diff * diff * (-l).exp();
                }
            }
        }
        let y = Tensor::new(vec![b, b, d], out)?;
        self.push(Op::PairwiseGaussianLogDensity { z, mu, logvar }, y, &[z, mu, logvar])
    }

    /// Reverse pass from a scalar node. May be called once per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient flowing into {}",
                    self.nodes[idx].op.name()
                )));
            }
            self.backprop_node(idx, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        let mut acc = |id: NodeId, t: Tensor<T>| match &mut grads[id.0] {
            Some(existing) => existing.add_scaled(&t, T::one()),
            slot @ None => *slot = Some(t),
        };
        let node = &self.nodes[idx];
        let half = T::lit(0.5);
        match &node.op {
            Op::Input => {}
            Op::Param(pid) => match out.map.get_mut(pid) {
                Some(existing) => existing.add_scaled(&g, T::one()),
                None => {
                    out.map.insert(*pid, g);
                }
            },
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let n = xv.rows();
                let fan_in = wv.shape()[1];
                let out_w = wv.shape()[0];
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); out_w * fan_in];
                    matmul(g.data(), true, xv.data(), false, &mut dw, out_w, n, fan_in, false);
                    acc(*w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); out_w];
                    for row in g.data().chunks(out_w) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    acc(*b, Tensor::new(vec![out_w], db)?);
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * fan_in];
                    matmul(g.data(), false, wv.data(), false, &mut dx, n, out_w, fan_in, false);
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
            }
            Op::Conv2d { x, w, b, attrs } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let ws = wv.shape();
                let geo = Self::conv_geometry(xv.shape(), ws[2], *attrs)?;
                let out_c = ws[0];
                let hw = geo.out_height() * geo.out_width();
                let positions = geo.out_positions();
                let plen = geo.patch_len();
                let g_rows = nchw_to_rows(g.data(), geo.batch, out_c, hw);
                if self.wants(*w) {
                    let cols = im2col(xv.data(), &geo);
                    let mut dw = vec![T::zero(); out_c * plen];
                    matmul(&g_rows, true, &cols, false, &mut dw, out_c, positions, plen, false);
                    acc(*w, Tensor::new(ws.to_vec(), dw)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); out_c];
                    for row in g_rows.chunks(out_c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    acc(*b, Tensor::new(vec![out_c], db)?);
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); positions * plen];
                    matmul(&g_rows, false, wv.data(), false, &mut dcols, positions, out_c, plen, false);
                    acc(*x, Tensor::new(xv.shape().to_vec(), col2im(&dcols, &geo))?);
                }
            }
            Op::ConvTranspose2d { x, w, b, attrs } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (xs, ws) = (xv.shape(), wv.shape());
                let (in_c, out_c, k) = (ws[0], ws[1], ws[2]);
                let gs = g.shape();
                let geo = ConvGeometry {
                    batch: gs[0],
                    channels: out_c,
                    height: gs[2],
                    width: gs[3],
                    kernel: k,
                    stride: attrs.stride,
                    pad: attrs.pad,
                };
                let hw = xs[2] * xs[3];
                let rows = xs[0] * hw;
                let plen = geo.patch_len();
                let dcols = im2col(g.data(), &geo);
                if self.wants(*w) {
                    let x_rows = nchw_to_rows(xv.data(), xs[0], in_c, hw);
                    let mut dw = vec![T::zero(); in_c * plen];
                    matmul(&x_rows, true, &dcols, false, &mut dw, in_c, rows, plen, false);
                    acc(*w, Tensor::new(ws.to_vec(), dw)?);
                }
                if self.wants(*b) {
                    let plane = gs[2] * gs[3];
                    let mut db = vec![T::zero(); out_c];
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        db[i % out_c] = db[i % out_c] + chunk.iter().copied().sum();
                    }
                    acc(*b, Tensor::new(vec![out_c], db)?);
                }
                if self.wants(*x) {
                    let mut dx_rows = vec![T::zero(); rows * in_c];
                    matmul(&dcols, false, wv.data(), true, &mut dx_rows, rows, plen, in_c, false);
                    let dx = rows_to_nchw(&dx_rows, xs[0], in_c, hw);
                    acc(*x, Tensor::new(xs.to_vec(), dx)?);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                acc(*x, g.reshape(&shape)?);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                    acc(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                    acc(*b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * *c)),
            Op::AddScalar(x) => acc(*x, g),
            Op::Exp(x) => {
                let y = node.value.as_ref().unwrap();
                let d = g.data().iter().zip(y.data()).map(|(&g, &y)| g * y).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &x)| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::SliceCols { x, start } => {
                let xs = self.shape(*x).to_vec();
                let (n, c) = (xs[0], xs[1]);
                let len = g.shape()[1];
                let mut d = vec![T::zero(); n * c];
                for r in 0..n {
                    d[r * c + start..r * c + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(*x, Tensor::new(xs, d)?);
            }
            Op::ConcatCols(xs) => {
                let n = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for &x in xs {
                    let w = self.shape(x)[1];
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        acc(x, Tensor::new(vec![n, w], d)?);
                    }
                    offset += w;
                }
            }
            Op::SumAll(x) => {
                let s = self.shape(*x).to_vec();
                acc(*x, Tensor::full(&s, g.item()));
            }
            Op::SumAxis { x, axis } => {
                let s = self.shape(*x).to_vec();
                let (outer, len, inner) = axis_split(&s, *axis);
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        d[(o * len + a) * inner..(o * len + a + 1) * inner].copy_from_slice(src);
                    }
                }
                acc(*x, Tensor::new(s, d)?);
            }
            Op::LogSumExpAxis { x, axis } => {
                let xv = self.value(*x);
                let y = node.value.as_ref().unwrap();
                let s = xv.shape().to_vec();
                let (outer, len, inner) = axis_split(&s, *axis);
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            let at = (o * len + a) * inner + i;
                            let oi = o * inner + i;
                            d[at] = g.data()[oi] * (xv.data()[at] - y.data()[oi]).exp();
                        }
                    }
                }
                acc(*x, Tensor::new(s, d)?);
            }
            Op::DiagGaussianKl { mu, logvar } => {
                let (mv, lv) = (self.value(*mu), self.value(*logvar));
                if self.wants(*mu) {
                    let d = g.data().iter().zip(mv.data()).map(|(&g, &m)| g * m).collect();
                    acc(*mu, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.wants(*logvar) {
                    let d = g
                        .data()
                        .iter()
                        .zip(lv.data())
                        .map(|(&g, &l)| g * half * (l.exp() - T::one()))
                        .collect();
                    acc(*logvar, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::BernoulliNll { logits, target } => {
                let lv = self.value(*logits);
                let n = lv.rows();
                let per = if n == 0 { 0 } else { lv.len() / n };
                let mut d = Vec::with_capacity(lv.len());
                for r in 0..n {
                    let gr = g.data()[r];
                    for p in 0..per {
                        let l = lv.data()[r * per + p];
                        let t = target.data()[r * per + p];
                        let sig = T::one() / (T::one() + (-l).exp());
                        d.push(gr * (sig - t));
                    }
                }
                acc(*logits, Tensor::new(lv.shape().to_vec(), d)?);
            }
            Op::Reparameterize { mu, logvar, noise } => {
                if self.wants(*mu) {
                    acc(*mu, g.clone());
                }
                if self.wants(*logvar) {
                    let lv = self.value(*logvar);
                    let d = g
                        .data()
                        .iter()
                        .zip(lv.data())
                        .zip(noise.data())
                        .map(|((&g, &l), &e)| g * half * (half * l).exp() * e)
                        .collect();
                    acc(*logvar, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::GaussianLogDensity { z, mu, logvar } => {
                let (zv, mv, lv) = (self.value(*z), self.value(*mu), self.value(*logvar));
                let len = g.len();
                let mut dz = Vec::with_capacity(len);
                let mut dl = Vec::with_capacity(len);
                for i in 0..len {
                    let prec = (-lv.data()[i]).exp();
                    let diff = zv.data()[i] - mv.data()[i];
                    let gi = g.data()[i];
                    dz.push(-gi * diff * prec);
                    dl.push(gi * (-half + half * diff * diff * prec));
                }
                let shape = g.shape().to_vec();
                if self.wants(*mu) {
                    acc(*mu, Tensor::new(shape.clone(), dz.iter().map(|&v| -v).collect())?);
                }
                if self.wants(*z) {
                    acc(*z, Tensor::new(shape.clone(), dz)?);
                }
                if self.wants(*logvar) {
                    acc(*logvar, Tensor::new(shape, dl)?);
                }
            }
            Op::StdNormalLogDensity(z) => {
                let zv = self.value(*z);
                let d = g.data().iter().zip(zv.data()).map(|(&g, &z)| -g * z).collect();
                acc(*z, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::PairwiseGaussianLogDensity { z, mu, logvar } => {
                let s = self.shape(*z).to_vec();
                let (b, dim) = (s[0], s[1]);
                let (zv, mv, lv) = (
                    self.value(*z).data(),
                    self.value(*mu).data(),
                    self.value(*logvar).data(),
                );
                let mut dz = vec![T::zero(); b * dim];
                let mut dm = vec![T::zero(); b * dim];
                let mut dl = vec![T::zero(); b * dim];
                for i in 0..b {
                    for j in 0..b {
                        for k in 0..dim {
                            let gi = g.data()[(i * b + j) * dim + k];
                            let prec = (-lv[j * dim + k]).exp();
                            let diff = zv[i * dim + k] - mv[j * dim + k];
                            dz[i * dim + k] = dz[i * dim + k] - gi * diff * prec;
                            dm[j * dim + k] = dm[j * dim + k] + gi * diff * prec;
                            dl[j * dim + k] =
                                dl[j * dim + k] + gi * (-half + half * diff * diff * prec);
                        }
                    }
                }
                if self.wants(*z) {
                    acc(*z, Tensor::new(s.clone(), dz)?);
                }
                if self.wants(*mu) {
                    acc(*mu, Tensor::new(s.clone(), dm)?);
                }
                if self.wants(*logvar) {
                    acc(*logvar, Tensor::new(s, dl)?);
                }
            }
        }
        Ok(())
    }
}
