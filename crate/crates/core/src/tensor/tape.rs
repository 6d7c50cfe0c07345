use std::sync::Arc;

use super::kernels::{self, ConvGeom, MixGeom};
use super::{conv_geom, ensure_finite, linear_dims, matmul_dims, RunningStats, Tensor, BATCH_NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        cin: usize,
        cout: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        batch_stats: bool,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    ConcatChannels(Vec<Var>),
    Gather {
        src: Var,
        index: Arc<Vec<usize>>,
    },
    GroupedMix {
        x: Var,
        r: Var,
        geom: MixGeom,
    },
    AddGroupBias {
        x: Var,
        beta: Var,
        groups: usize,
    },
    AddTokenBias {
        x: Var,
        bias: Var,
        geom: MixGeom,
    },
    MeanTokens {
        x: Var,
        batch: usize,
        tokens: usize,
        channels: usize,
    },
    ScaleRows {
        x: Var,
        factors: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Define-by-run gradient tape.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid reverse topological order. A tape supports exactly one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, op: &'static str, value: Tensor, record: Op, inputs: &[Var]) -> Result<Var> {
        ensure_finite(op, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            // Nodes that cannot reach a trainable leaf keep no backward state.
            op: if requires_grad { record } else { Op::Leaf },
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::hadamard(self.value(a), self.value(b))?;
        self.push("hadamard", value, Op::Hadamard(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e * factor).collect())?;
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let value = Tensor::new([m, n], kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n))?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `x[..., cin] · w[cin, cout] (+ b[cout])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bshape = b.map(|b| self.shape(b).to_vec());
        let (cin, cout) = linear_dims(self.shape(x), self.shape(w), bshape.as_deref())?;
        let rows = self.value(x).len() / cin;
        let out = kernels::linear(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            rows,
            cin,
            cout,
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", value, Op::Linear { x, w, b, rows, cin, cout }, &inputs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape("layer_norm", format!("affine for {c} channels")));
        }
        let rows = self.value(x).len() / c;
        let (xhat, rstd) = kernels::normalize_rows(self.value(x).data(), rows, c, eps);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for r in 0..rows {
            for ch in 0..c {
                out[r * c + ch] = out[r * c + ch] * g[ch] + b[ch];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = super::gelu(self.value(x));
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    /// Frame-wise convolution of `x[..., H, W, Cin]` with `w[k, k, Cin, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let geom = conv_geom(self.shape(x), self.shape(w), stride)?;
        if self.shape(b) != [geom.cout] {
            return Err(Error::shape("conv2d", format!("bias {:?}", self.shape(b))));
        }
        let out = kernels::conv2d(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let rank = self.shape(x).len();
        let mut shape = self.shape(x)[..rank - 3].to_vec();
        shape.extend([geom.oh, geom.ow, geom.cout]);
        let value = Tensor::new(shape, out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    /// Batch norm over all non-channel axes; see [`BatchNormStats`] for the
    /// train/eval split.
    pub fn batch_norm(&mut self, x: Var, gain: Var, bias: Var, stats: BatchNormStats<'_>) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape("batch_norm", format!("affine for {c} channels")));
        }
        let rows = self.value(x).len() / c;
        let (mean, var, batch_stats) = match stats {
            BatchNormStats::Batch(running) => {
                let (m, v) = kernels::channel_moments(self.value(x).data(), rows, c);
                if running.mean.len() != c {
                    return Err(Error::shape("batch_norm", "running stats width"));
                }
                running.update(&m, &v, rows);
                (m, v, true)
            }
            BatchNormStats::Running(running) => {
                if !running.is_initialized() {
                    return Err(Error::UninitializedStats);
                }
                if running.mean.len() != c {
                    return Err(Error::shape("batch_norm", "running stats width"));
                }
                (running.mean.clone(), running.var.clone(), false)
            }
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let src = self.value(x).data();
        let mut xhat = vec![0.0; src.len()];
        for r in 0..rows {
            for ch in 0..c {
                xhat[r * c + ch] = (src[r * c + ch] - mean[ch]) * rstd[ch];
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for r in 0..rows {
            for ch in 0..c {
                out[r * c + ch] = out[r * c + ch] * g[ch] + b[ch];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm { x, gain, bias, xhat, rstd, batch_stats },
            &[x, gain, bias],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        self.push("permute", value, Op::Permute { x, axes: axes.to_vec() }, &[x])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_channels(start, len)?;
        self.push("slice_channels", value, Op::SliceChannels { x, start }, &[x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_channels(&tensors)?;
        self.push("concat_channels", value, Op::ConcatChannels(parts.to_vec()), parts)
    }

    /// `out[i] = src[index[i]]` over flat storage; gradients scatter-add back.
    pub fn gather(&mut self, src: Var, index: Arc<Vec<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let s = self.value(src).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= s.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of {}", s.len())));
        }
        let data = index.iter().map(|&i| s[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push("gather", value, Op::Gather { src, index }, &[src])
    }

    /// Token mixing with one `tokens×tokens` matrix per contiguous channel group.
    ///
    /// `x` is viewed as `[outer, tokens, inner, channels]` and `r` has shape
    /// `[groups, tokens, tokens]`.
    pub fn grouped_mix(&mut self, x: Var, r: Var, outer: usize, tokens: usize, inner: usize) -> Result<Var> {
        let geom = self.mix_geom(x, r, outer, tokens, inner)?;
        let out = kernels::grouped_mix(self.value(x).data(), self.value(r).data(), &geom);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("grouped_mix", value, Op::GroupedMix { x, r, geom }, &[x, r])
    }

    fn mix_geom(&self, x: Var, r: Var, outer: usize, tokens: usize, inner: usize) -> Result<MixGeom> {
        let channels = self.value(x).channels();
        if outer * tokens * inner * channels != self.value(x).len() {
            return Err(Error::shape(
                "grouped_mix",
                format!("view {outer}x{tokens}x{inner}x{channels} of {:?}", self.shape(x)),
            ));
        }
        let groups = match self.shape(r) {
            [g, n1, n2] if *n1 == tokens && *n2 == tokens && *g > 0 && channels.is_multiple_of(*g) => *g,
            other => {
                return Err(Error::shape(
                    "grouped_mix",
                    format!("relation {other:?} for {tokens} tokens, {channels} channels"),
                ))
            }
        };
        Ok(MixGeom { outer, tokens, inner, channels, groups })
    }

    /// Adds `beta[g]` to every channel of contiguous group `g`.
    pub fn add_group_bias(&mut self, x: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).channels();
        let groups = match self.shape(beta) {
            [g] if *g > 0 && c.is_multiple_of(*g) => *g,
            other => return Err(Error::shape("add_group_bias", format!("{other:?} for {c} channels"))),
        };
        let cg = c / groups;
        let b = self.value(beta).data();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += b[(i % c) / cg];
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("add_group_bias", value, Op::AddGroupBias { x, beta, groups }, &[x, beta])
    }

    /// Adds `bias[t]` to every channel of token `t` under the
    /// `[outer, tokens, inner, channels]` view.
    pub fn add_token_bias(&mut self, x: Var, bias: Var, outer: usize, tokens: usize, inner: usize) -> Result<Var> {
        let channels = self.value(x).channels();
        if outer * tokens * inner * channels != self.value(x).len() || self.shape(bias) != [tokens] {
            return Err(Error::shape("add_token_bias", format!("bias {:?}", self.shape(bias))));
        }
        let geom = MixGeom { outer, tokens, inner, channels, groups: 1 };
        let slab = inner * channels;
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += b[(i / slab) % tokens];
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("add_token_bias", value, Op::AddTokenBias { x, bias, geom }, &[x, bias])
    }

    /// Mean over the middle axis of `x[batch, tokens, channels]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let (batch, tokens, channels) = match self.shape(x) {
            [b, t, c] => (*b, *t, *c),
            other => return Err(Error::shape("mean_tokens", format!("{other:?}"))),
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; batch * channels];
        for b in 0..batch {
            let o = &mut out[b * channels..(b + 1) * channels];
            for t in 0..tokens {
                kernels::axpy(o, 1.0, &src[(b * tokens + t) * channels..(b * tokens + t + 1) * channels]);
            }
            for v in o.iter_mut() {
                *v /= tokens as f64;
            }
        }
        let value = Tensor::new([batch, channels], out)?;
        self.push("mean_tokens", value, Op::MeanTokens { x, batch, tokens, channels }, &[x])
    }

    /// Multiplies each slice along the leading axis by a constant factor.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let rows = self.shape(x)[0];
        if factors.len() != rows {
            return Err(Error::shape("scale_rows", format!("{} factors for {rows} rows", factors.len())));
        }
        let per = self.value(x).len() / rows;
        let mut out = self.value(x).data().to_vec();
        for (r, f) in factors.iter().enumerate() {
            for v in &mut out[r * per..(r + 1) * per] {
                *v *= f;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("scale_rows", value, Op::ScaleRows { x, factors }, &[x])
    }

    /// Mean softmax cross-entropy of `logits[batch, classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (batch, classes) = match self.shape(logits) {
            [b, k] if *b == labels.len() => (*b, *k),
            other => return Err(Error::shape("cross_entropy", format!("{other:?} for {} labels", labels.len()))),
        };
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Invalid(format!("label {l} out of {classes} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for b in 0..batch {
            let row = &z[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for k in 0..classes {
                probs[b * classes + k] = (row[k] - max).exp() / denom;
            }
            loss += denom.ln() + max - row[labels[b]];
        }
        let value = Tensor::scalar(loss / batch as f64);
        self.push(
            "cross_entropy",
            value,
            Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `loss`; afterwards every trainable leaf holds
    /// `d loss / d leaf` (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeExhausted);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (v, contrib) in self.node_backward(node, &g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => kernels::axpy(acc, 1.0, &contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.grad = Some(Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(x, f) => out.push((*x, g.iter().map(|v| v * f).collect())),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.nodes[x.0].value.len()])),
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_a_bt_acc(&mut da, g, val(*b), *m, *n, *k);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_at_b_acc(&mut db, val(*a), g, *m, *k, *n);
                    out.push((*b, db));
                }
            }
            Op::Linear { x, w, b, rows, cin, cout } => {
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * cin];
                    kernels::matmul_a_bt_acc(&mut dx, g, val(*w), *rows, *cout, *cin);
                    out.push((*x, dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; cin * cout];
                    kernels::matmul_at_b_acc(&mut dw, val(*x), g, *rows, *cin, *cout);
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; *cout];
                    for r in 0..*rows {
                        kernels::axpy(&mut db, 1.0, &g[r * cout..(r + 1) * cout]);
                    }
                    out.push((b, db));
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let rows = rstd.len();
                let c = xhat.len() / rows;
                let gv = val(*gain);
                if self.wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let span = r * c..(r + 1) * c;
                        let (gy, xh) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for ch in 0..c {
                            let d = gy[ch] * gv[ch];
                            mean_d += d;
                            mean_dx += d * xh[ch];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for ch in 0..c {
                            let d = gy[ch] * gv[ch];
                            dx[r * c + ch] = rstd[r] * (d - mean_d - xh[ch] * mean_dx);
                        }
                    }
                    out.push((*x, dx));
                }
                push_affine_grads(&mut out, self, *gain, *bias, g, xhat, c);
            }
            Op::Gelu(x) => {
                out.push((*x, g.iter().zip(val(*x)).map(|(d, &v)| d * kernels::gelu_grad(v)).collect()));
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.wants(*x).then(|| vec![0.0; self.nodes[x.0].value.len()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; self.nodes[w.0].value.len()]);
                let mut db = self.wants(*b).then(|| vec![0.0; geom.cout]);
                kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                out.extend(db.map(|d| (*b, d)));
            }
            Op::BatchNorm { x, gain, bias, xhat, rstd, batch_stats } => {
                let c = rstd.len();
                let rows = xhat.len() / c;
                let gv = val(*gain);
                if self.wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    if *batch_stats {
                        let mut mean_d = vec![0.0; c];
                        let mut mean_dx = vec![0.0; c];
                        for r in 0..rows {
                            for ch in 0..c {
                                let d = g[r * c + ch] * gv[ch];
                                mean_d[ch] += d;
                                mean_dx[ch] += d * xhat[r * c + ch];
                            }
                        }
                        for ch in 0..c {
                            mean_d[ch] /= rows as f64;
                            mean_dx[ch] /= rows as f64;
                        }
                        for r in 0..rows {
                            for ch in 0..c {
                                let i = r * c + ch;
                                let d = g[i] * gv[ch];
                                dx[i] = rstd[ch] * (d - mean_d[ch] - xhat[i] * mean_dx[ch]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for ch in 0..c {
                                let i = r * c + ch;
                                dx[i] = g[i] * gv[ch] * rstd[ch];
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                push_affine_grads(&mut out, self, *gain, *bias, g, xhat, c);
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                out.push((*x, kernels::permute(g, node.value.shape(), &inverse)));
            }
            Op::SliceChannels { x, start } => {
                let src = &self.nodes[x.0].value;
                let c = src.channels();
                let len = node.value.channels();
                let mut dx = vec![0.0; src.len()];
                for r in 0..src.len() / c {
                    dx[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                out.push((*x, dx));
            }
            Op::ConcatChannels(parts) => {
                let total = node.value.channels();
                let rows = node.value.len() / total;
                let mut offset = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.channels();
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        out.push((*p, dp));
                    }
                    offset += c;
                }
            }
            Op::Gather { src, index } => {
                let mut d = vec![0.0; self.nodes[src.0].value.len()];
                for (gv, &i) in g.iter().zip(index.iter()) {
                    d[i] += gv;
                }
                out.push((*src, d));
            }
            Op::GroupedMix { x, r, geom } => {
                let mut dx = self.wants(*x).then(|| vec![0.0; self.nodes[x.0].value.len()]);
                let mut dr = self.wants(*r).then(|| vec![0.0; self.nodes[r.0].value.len()]);
                kernels::grouped_mix_backward(val(*x), val(*r), g, geom, dx.as_deref_mut(), dr.as_deref_mut());
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dr.map(|d| (*r, d)));
            }
            Op::AddGroupBias { x, beta, groups } => {
                out.push((*x, g.to_vec()));
                if self.wants(*beta) {
                    let c = node.value.channels();
                    let cg = c / groups;
                    let mut db = vec![0.0; *groups];
                    for (i, gv) in g.iter().enumerate() {
                        db[(i % c) / cg] += gv;
                    }
                    out.push((*beta, db));
                }
            }
            Op::AddTokenBias { x, bias, geom } => {
                out.push((*x, g.to_vec()));
                if self.wants(*bias) {
                    let slab = geom.inner * geom.channels;
                    let mut db = vec![0.0; geom.tokens];
                    for (i, gv) in g.iter().enumerate() {
                        db[(i / slab) % geom.tokens] += gv;
                    }
                    out.push((*bias, db));
                }
            }
            Op::MeanTokens { x, batch, tokens, channels } => {
                let mut dx = vec![0.0; batch * tokens * channels];
                let inv = 1.0 / *tokens as f64;
                for b in 0..*batch {
                    for t in 0..*tokens {
                        let o = (b * tokens + t) * channels;
                        for ch in 0..*channels {
                            dx[o + ch] = g[b * channels + ch] * inv;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::ScaleRows { x, factors } => {
                let per = g.len() / factors.len();
                let dx = g.iter().enumerate().map(|(i, v)| v * factors[i / per]).collect();
                out.push((*x, dx));
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / batch as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (b, &l) in labels.iter().enumerate() {
                    d[b * classes + l] -= scale;
                }
                out.push((*logits, d));
            }
        }
        out
    }
}

fn push_affine_grads(out: &mut Vec<(Var, Vec<f64>)>, tape: &Tape, gain: Var, bias: Var, g: &[f64], xhat: &[f64], c: usize) {
    let rows = xhat.len() / c;
    if tape.wants(gain) {
        let mut dg = vec![0.0; c];
        for r in 0..rows {
            for ch in 0..c {
                dg[ch] += g[r * c + ch] * xhat[r * c + ch];
            }
        }
        out.push((gain, dg));
    }
    if tape.wants(bias) {
        let mut db = vec![0.0; c];
        for r in 0..rows {
            kernels::axpy(&mut db, 1.0, &g[r * c..(r + 1) * c]);
        }
        out.push((bias, db));
    }
}

/// Source of normalization statistics for [`Tape::batch_norm`].
pub enum BatchNormStats<'a> {
    /// Train mode: batch moments, folded into the running statistics.
    Batch(&'a mut RunningStats),
    /// Eval mode: frozen running statistics.
    Running(&'a RunningStats),
}
