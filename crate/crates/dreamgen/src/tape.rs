//! Reverse-mode automatic differentiation.
//!
//! Define-by-run tape rebuilt per forward pass: ops append nodes in execution
//! order and backward replays them in reverse, so a changing input (the dream
//! ascent re-differentiates w.r.t. a new image every iteration) needs no graph
//! surgery. Node data lives in an arena indexed by [`Var`]; gradients
//! accumulate across repeated backward calls until [`Tape::zero_grads`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Divisor used for channel variance: population (1/n) or sample (1/(n-1)).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatDivisor {
    #[default]
    Population,
    Sample,
}

impl StatDivisor {
    pub fn divisor(self, n: usize) -> f64 {
        match self {
            StatDivisor::Population => n as f64,
            StatDivisor::Sample => (n - 1) as f64,
        }
    }
}

/// Divergence metrics between two batches of (already smoothed) logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    /// KL(softmax(first) || softmax(second)); the first argument is the target.
    #[default]
    Kl,
    /// Jensen-Shannon divergence between the two softmaxes (symmetric).
    Js,
    /// Mean squared difference between the two softmax probability vectors.
    Mse,
    /// Mean squared difference between raw logits (config-flag variant).
    MseLogit,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: Var,
    },
    AvgPool2d {
        input: Var,
        window: usize,
    },
    MaxPool2d {
        input: Var,
        window: usize,
        argmax: Vec<usize>,
    },
    SpatialMean {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    FrobeniusNorm {
        input: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Adain {
        content: Var,
        style_mean: Vec<f64>,
        style_std: Vec<f64>,
        eps: f64,
        divisor: StatDivisor,
        content_mean: Vec<f64>,
        content_std: Vec<f64>,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Divergence {
        kind: DivergenceKind,
        first: Var,
        second: Var,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

/// Arena of forward values plus the recorded ops.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Register a leaf. Gradient tracking follows the tensor's own flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Register a leaf that never receives gradients, regardless of the
    /// tensor's flag (detached style branch, fixed parameters during dreaming).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::from_vec(&self.nodes[v.0].shape, self.nodes[v.0].data.clone())
            .expect("tape node holds a valid tensor")
    }

    pub fn item(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// 2-D cross-correlation: input [N,C,H,W], kernel [D,C,KH,KW], bias [D].
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 4 || kshape.len() != 4 || bshape.len() != 1 {
            return Err(Error::Dim(format!(
                "conv2d expects input[N,C,H,W], kernel[D,C,KH,KW], bias[D]; got {ishape:?}, {kshape:?}, {bshape:?}"
            )));
        }
        let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (dout, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc != cin || bshape[0] != dout {
            return Err(Error::Dim(format!(
                "conv2d channel mismatch: input C={cin}, kernel C={kc}, kernel D={dout}, bias {}",
                bshape[0]
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;

        let mut out = vec![0.0; n * dout * ho * wo];
        {
            let idata = &self.nodes[input.0].data;
            let kdata = &self.nodes[kernel.0].data;
            let bdata = &self.nodes[bias.0].data;
            for ni in 0..n {
                for d in 0..dout {
                    let oplane = &mut out[(ni * dout + d) * ho * wo..][..ho * wo];
                    oplane.iter_mut().for_each(|v| *v = bdata[d]);
                    for c in 0..cin {
                        let iplane = &idata[(ni * cin + c) * h * w..][..h * w];
                        let kbase = (d * cin + c) * kh * kw;
                        for p in 0..kh {
                            for q in 0..kw {
                                let kv = kdata[kbase + p * kw + q];
                                if kv == 0.0 {
                                    continue;
                                }
                                accumulate_shifted(
                                    oplane, iplane, kv, ho, wo, h, w, stride, padding, p, q,
                                );
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            vec![n, dout, ho, wo],
            out,
            needs,
        ))
    }

    /// Elementwise max(0, v). Sub-gradient at 0 is 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[input.0].shape.clone();
        let needs = self.needs(input);
        self.push(Op::Relu { input }, shape, data, needs)
    }

    /// Non-overlapping window means over [N,C,H,W]; H and W must divide evenly.
    pub fn avg_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (n, c, h, w) = pool_dims(&shape, window)?;
        let (ho, wo) = (h / window, w / window);
        let inv = 1.0 / (window * window) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        {
            let idata = &self.nodes[input.0].data;
            for plane in 0..n * c {
                let iplane = &idata[plane * h * w..][..h * w];
                let oplane = &mut out[plane * ho * wo..][..ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        let mut s = 0.0;
                        for di in 0..window {
                            let row = &iplane[(i * window + di) * w + j * window..][..window];
                            s += row.iter().sum::<f64>();
                        }
                        oplane[i * wo + j] = s * inv;
                    }
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Op::AvgPool2d { input, window },
            vec![n, c, ho, wo],
            out,
            needs,
        ))
    }

    /// Non-overlapping window maxima; gradient routes to the first maximal
    /// element of each window.
    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (n, c, h, w) = pool_dims(&shape, window)?;
        let (ho, wo) = (h / window, w / window);
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        {
            let idata = &self.nodes[input.0].data;
            for plane in 0..n * c {
                let base = plane * h * w;
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0;
                        for di in 0..window {
                            for dj in 0..window {
                                let at = base + (i * window + di) * w + j * window + dj;
                                if idata[at] > best {
                                    best = idata[at];
                                    best_at = at;
                                }
                            }
                        }
                        out[plane * ho * wo + i * wo + j] = best;
                        argmax[plane * ho * wo + i * wo + j] = best_at;
                    }
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Op::MaxPool2d {
                input,
                window,
                argmax,
            },
            vec![n, c, ho, wo],
            out,
            needs,
        ))
    }

    /// Global spatial average: [N,C,H,W] -> [N,C].
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dim(format!(
                "spatial_mean expects [N,C,H,W], got {shape:?}"
            )));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let inv = 1.0 / hw as f64;
        let idata = &self.nodes[input.0].data;
        let out: Vec<f64> = (0..n * c)
            .map(|plane| idata[plane * hw..][..hw].iter().sum::<f64>() * inv)
            .collect();
        let needs = self.needs(input);
        Ok(self.push(Op::SpatialMean { input }, vec![n, c], out, needs))
    }

    /// input [N,F] * weight[C,F]^T + bias[C] -> [N,C].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 2 || wshape.len() != 2 || bshape.len() != 1 {
            return Err(Error::Dim(format!(
                "linear expects input[N,F], weight[C,F], bias[C]; got {ishape:?}, {wshape:?}, {bshape:?}"
            )));
        }
        let (n, f) = (ishape[0], ishape[1]);
        let (c, wf) = (wshape[0], wshape[1]);
        if wf != f || bshape[0] != c {
            return Err(Error::Dim(format!(
                "linear inner dims disagree: input F={f}, weight F={wf}, weight C={c}, bias {}",
                bshape[0]
            )));
        }
        let mut out = vec![0.0; n * c];
        {
            let idata = &self.nodes[input.0].data;
            let wdata = &self.nodes[weight.0].data;
            let bdata = &self.nodes[bias.0].data;
            for ni in 0..n {
                let irow = &idata[ni * f..][..f];
                for ci in 0..c {
                    let wrow = &wdata[ci * f..][..f];
                    let dot: f64 = irow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                    out[ni * c + ci] = dot + bdata[ci];
                }
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Op::Linear {
                input,
                weight,
                bias,
            },
            vec![n, c],
            out,
            needs,
        ))
    }

    /// sqrt of the sum of squares, as a scalar. Zero norm has zero gradient.
    pub fn frobenius_norm(&mut self, input: Var) -> Var {
        let sq: f64 = self.nodes[input.0].data.iter().map(|v| v * v).sum();
        let needs = self.needs(input);
        self.push(Op::FrobeniusNorm { input }, vec![1], vec![sq.sqrt()], needs)
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dim(format!(
                "softmax_ce expects logits [N,C], got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(Error::Dim(format!(
                "softmax_ce got {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let data = &self.nodes[logits.0].data;
        let logp = log_softmax_rows(data, n, c);
        let mut loss = 0.0;
        for (ni, &label) in labels.iter().enumerate() {
            loss -= logp[ni * c + label];
        }
        loss /= n as f64;
        let probs: Vec<f64> = logp.iter().map(|lp| lp.exp()).collect();
        let needs = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            needs,
        ))
    }

    /// Re-align per-sample channel statistics of `content` to the given style
    /// stats: (content - mu_c) * sigma_s / (sigma_c + eps) + mu_s. Style stats
    /// are constants; gradient flows only through the content branch.
    pub fn adain(
        &mut self,
        content: Var,
        style_mean: &[f64],
        style_std: &[f64],
        eps: f64,
        divisor: StatDivisor,
    ) -> Result<Var> {
        let shape = self.shape(content).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dim(format!(
                "adain expects content [N,D,H,W], got {shape:?}"
            )));
        }
        let (n, d, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if style_mean.len() != n * d || style_std.len() != n * d {
            return Err(Error::Dim(format!(
                "adain style stats length {} does not match N*D = {}",
                style_mean.len(),
                n * d
            )));
        }
        if divisor == StatDivisor::Sample && hw < 2 {
            return Err(Error::Config(
                "sample-divisor statistics need at least 2 spatial cells".into(),
            ));
        }
        let m = divisor.divisor(hw);
        let mut out = vec![0.0; n * d * hw];
        let mut content_mean = vec![0.0; n * d];
        let mut content_std = vec![0.0; n * d];
        {
            let cdata = &self.nodes[content.0].data;
            for plane in 0..n * d {
                let src = &cdata[plane * hw..][..hw];
                let mu: f64 = src.iter().sum::<f64>() / hw as f64;
                let var: f64 = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
                let sigma = var.sqrt();
                content_mean[plane] = mu;
                content_std[plane] = sigma;
                let denom = sigma + eps;
                // Zero denominator: constant channel with eps = 0 maps to the
                // style mean (ratio taken as 0 rather than 0/0).
                let ratio = if denom > 0.0 {
                    style_std[plane] / denom
                } else {
                    0.0
                };
                let dst = &mut out[plane * hw..][..hw];
                let ms = style_mean[plane];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = (v - mu) * ratio + ms;
                }
            }
        }
        let needs = self.needs(content);
        Ok(self.push(
            Op::Adain {
                content,
                style_mean: style_mean.to_vec(),
                style_std: style_std.to_vec(),
                eps,
                divisor,
                content_mean,
                content_std,
            },
            shape,
            out,
            needs,
        ))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|v| v * factor).collect();
        let shape = self.nodes[input.0].shape.clone();
        let needs = self.needs(input);
        self.push(Op::Scale { input, factor }, shape, data, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, shape, data, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, shape, data, needs))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.nodes[input.0].data.iter().sum();
        let needs = self.needs(input);
        self.push(Op::Sum { input }, vec![1], vec![s], needs)
    }

    /// Divergence between two [N,C] batches of smoothed logits. For KL the
    /// `first` argument is the target distribution.
    pub fn divergence(&mut self, kind: DivergenceKind, first: Var, second: Var) -> Result<Var> {
        let ashape = self.shape(first).to_vec();
        if ashape.len() != 2 || self.shape(second) != ashape.as_slice() {
            return Err(Error::Dim(format!(
                "divergence expects matching [N,C] logits, got {:?} vs {:?}",
                ashape,
                self.shape(second)
            )));
        }
        let (n, c) = (ashape[0], ashape[1]);
        let a = &self.nodes[first.0].data;
        let b = &self.nodes[second.0].data;
        let value = match kind {
            DivergenceKind::Kl => {
                let (lp, lq) = (log_softmax_rows(a, n, c), log_softmax_rows(b, n, c));
                let mut total = 0.0;
                for i in 0..n * c {
                    total += lp[i].exp() * (lp[i] - lq[i]);
                }
                total / n as f64
            }
            DivergenceKind::Js => {
                let (lp, lq) = (log_softmax_rows(a, n, c), log_softmax_rows(b, n, c));
                let mut total = 0.0;
                for i in 0..n * c {
                    let (p, q) = (lp[i].exp(), lq[i].exp());
                    let m = 0.5 * (p + q);
                    if p > 0.0 {
                        total += 0.5 * p * (lp[i] - m.ln());
                    }
                    if q > 0.0 {
                        total += 0.5 * q * (lq[i] - m.ln());
                    }
                }
                total / n as f64
            }
            DivergenceKind::Mse => {
                let (lp, lq) = (log_softmax_rows(a, n, c), log_softmax_rows(b, n, c));
                let mut total = 0.0;
                for i in 0..n * c {
                    let diff = lq[i].exp() - lp[i].exp();
                    total += diff * diff;
                }
                total / (n * c) as f64
            }
            DivergenceKind::MseLogit => {
                let mut total = 0.0;
                for i in 0..n * c {
                    let diff = b[i] - a[i];
                    total += diff * diff;
                }
                total / (n * c) as f64
            }
        };
        let needs = self.needs(first) || self.needs(second);
        Ok(self.push(
            Op::Divergence {
                kind,
                first,
                second,
            },
            vec![1],
            vec![value],
            needs,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Seeds the loss gradient with 1 and
    /// adds into existing leaf gradients (cleared via [`Tape::zero_grads`]).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Dim(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        match &mut self.grads[loss.0] {
            Some(g) => g[0] += 1.0,
            slot => *slot = Some(vec![1.0]),
        }
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(upstream) = self.grads[id].take() else {
                continue;
            };
            self.backward_node(id, &upstream);
            self.grads[id] = Some(upstream);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, delta: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].data.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        delta(slot);
    }

    fn backward_node(&mut self, id: usize, upstream: &[f64]) {
        // The borrow checker cannot see that gradient slots of inputs are
        // disjoint from this node's op payload, so ops are matched by copying
        // out the small metadata they need.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (input, kernel, bias, stride, padding) =
                    (*input, *kernel, *bias, *stride, *padding);
                self.backward_conv2d(id, upstream, input, kernel, bias, stride, padding);
            }
            Op::Relu { input } => {
                let input = *input;
                let mask: Vec<f64> = self.nodes[input.0]
                    .data
                    .iter()
                    .zip(upstream)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.add_grad(input, |slot| {
                    for (s, m) in slot.iter_mut().zip(&mask) {
                        *s += m;
                    }
                });
            }
            Op::AvgPool2d { input, window } => {
                let (input, window) = (*input, *window);
                let shape = self.nodes[input.0].shape.clone();
                let (h, w) = (shape[2], shape[3]);
                let (ho, wo) = (h / window, w / window);
                let planes = shape[0] * shape[1];
                let inv = 1.0 / (window * window) as f64;
                self.add_grad(input, |slot| {
                    for plane in 0..planes {
                        let up = &upstream[plane * ho * wo..][..ho * wo];
                        let dst = &mut slot[plane * h * w..][..h * w];
                        for i in 0..ho {
                            for j in 0..wo {
                                let g = up[i * wo + j] * inv;
                                for di in 0..window {
                                    let row =
                                        &mut dst[(i * window + di) * w + j * window..][..window];
                                    row.iter_mut().for_each(|v| *v += g);
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool2d { input, argmax, .. } => {
                let input = *input;
                let argmax = argmax.clone();
                self.add_grad(input, |slot| {
                    for (k, &at) in argmax.iter().enumerate() {
                        slot[at] += upstream[k];
                    }
                });
            }
            Op::SpatialMean { input } => {
                let input = *input;
                let shape = self.nodes[input.0].shape.clone();
                let hw = shape[2] * shape[3];
                let inv = 1.0 / hw as f64;
                self.add_grad(input, |slot| {
                    for (plane, &g) in upstream.iter().enumerate() {
                        let dst = &mut slot[plane * hw..][..hw];
                        dst.iter_mut().for_each(|v| *v += g * inv);
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let (n, f) = {
                    let s = &self.nodes[input.0].shape;
                    (s[0], s[1])
                };
                let c = self.nodes[weight.0].shape[0];
                if self.needs(input) {
                    let wdata = self.nodes[weight.0].data.clone();
                    self.add_grad(input, |slot| {
                        for ni in 0..n {
                            let dst = &mut slot[ni * f..][..f];
                            for ci in 0..c {
                                let g = upstream[ni * c + ci];
                                if g == 0.0 {
                                    continue;
                                }
                                let wrow = &wdata[ci * f..][..f];
                                for (d, &wv) in dst.iter_mut().zip(wrow) {
                                    *d += g * wv;
                                }
                            }
                        }
                    });
                }
                if self.needs(weight) {
                    let idata = self.nodes[input.0].data.clone();
                    self.add_grad(weight, |slot| {
                        for ni in 0..n {
                            let irow = &idata[ni * f..][..f];
                            for ci in 0..c {
                                let g = upstream[ni * c + ci];
                                if g == 0.0 {
                                    continue;
                                }
                                let dst = &mut slot[ci * f..][..f];
                                for (d, &iv) in dst.iter_mut().zip(irow) {
                                    *d += g * iv;
                                }
                            }
                        }
                    });
                }
                self.add_grad(bias, |slot| {
                    for ni in 0..n {
                        for ci in 0..c {
                            slot[ci] += upstream[ni * c + ci];
                        }
                    }
                });
            }
            Op::FrobeniusNorm { input } => {
                let input = *input;
                let norm = self.nodes[id].data[0];
                let g = upstream[0];
                if norm > 0.0 {
                    let scale = g / norm;
                    let src = self.nodes[input.0].data.clone();
                    self.add_grad(input, |slot| {
                        for (s, &v) in slot.iter_mut().zip(&src) {
                            *s += scale * v;
                        }
                    });
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                let labels = labels.clone();
                let probs = probs.clone();
                let n = labels.len();
                let c = probs.len() / n;
                let g = upstream[0] / n as f64;
                self.add_grad(logits, |slot| {
                    for (ni, &label) in labels.iter().enumerate() {
                        let row = &probs[ni * c..][..c];
                        let dst = &mut slot[ni * c..][..c];
                        for (k, (d, &p)) in dst.iter_mut().zip(row).enumerate() {
                            let indicator = if k == label { 1.0 } else { 0.0 };
                            *d += g * (p - indicator);
                        }
                    }
                });
            }
            Op::Adain {
                content,
                style_std,
                eps,
                divisor,
                content_mean,
                content_std,
                ..
            } => {
                let content = *content;
                let eps = *eps;
                let style_std = style_std.clone();
                let content_mean = content_mean.clone();
                let content_std = content_std.clone();
                let divisor = *divisor;
                let shape = self.nodes[content.0].shape.clone();
                let hw = shape[2] * shape[3];
                let m = divisor.divisor(hw);
                let src = self.nodes[content.0].data.clone();
                self.add_grad(content, |slot| {
                    for plane in 0..shape[0] * shape[1] {
                        let up = &upstream[plane * hw..][..hw];
                        let z = &src[plane * hw..][..hw];
                        let dst = &mut slot[plane * hw..][..hw];
                        let mu = content_mean[plane];
                        let sigma = content_std[plane];
                        let denom = sigma + eps;
                        let ratio = if denom > 0.0 {
                            style_std[plane] / denom
                        } else {
                            0.0
                        };
                        let up_mean: f64 = up.iter().sum::<f64>() / hw as f64;
                        // T = sum_i u_i (z_i - mu); the sigma-path term vanishes
                        // by convention on constant channels (sigma = 0).
                        let sigma_term = if sigma > 0.0 {
                            let t: f64 = up.iter().zip(z).map(|(&u, &v)| u * (v - mu)).sum();
                            style_std[plane] * t / (m * sigma * denom * denom)
                        } else {
                            0.0
                        };
                        for ((d, &u), &v) in dst.iter_mut().zip(up).zip(z) {
                            *d += ratio * (u - up_mean) - sigma_term * (v - mu);
                        }
                    }
                });
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                self.add_grad(input, |slot| {
                    for (s, &g) in slot.iter_mut().zip(upstream) {
                        *s += factor * g;
                    }
                });
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, |slot| {
                    for (s, &g) in slot.iter_mut().zip(upstream) {
                        *s += g;
                    }
                });
                self.add_grad(b, |slot| {
                    for (s, &g) in slot.iter_mut().zip(upstream) {
                        *s += g;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bdata = self.nodes[b.0].data.clone();
                    self.add_grad(a, |slot| {
                        for ((s, &g), &bv) in slot.iter_mut().zip(upstream).zip(&bdata) {
                            *s += g * bv;
                        }
                    });
                }
                if self.needs(b) {
                    let adata = self.nodes[a.0].data.clone();
                    self.add_grad(b, |slot| {
                        for ((s, &g), &av) in slot.iter_mut().zip(upstream).zip(&adata) {
                            *s += g * av;
                        }
                    });
                }
            }
            Op::Sum { input } => {
                let input = *input;
                let g = upstream[0];
                self.add_grad(input, |slot| {
                    slot.iter_mut().for_each(|s| *s += g);
                });
            }
            Op::Divergence {
                kind,
                first,
                second,
            } => {
                let (kind, first, second) = (*kind, *first, *second);
                self.backward_divergence(kind, first, second, upstream[0]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(
        &mut self,
        out_id: usize,
        upstream: &[f64],
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) {
        let ishape = self.nodes[input.0].shape.clone();
        let kshape = self.nodes[kernel.0].shape.clone();
        let oshape = self.nodes[out_id].shape.clone();
        let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (dout, kh, kw) = (kshape[0], kshape[2], kshape[3]);
        let (ho, wo) = (oshape[2], oshape[3]);

        if self.needs(input) {
            let kdata = self.nodes[kernel.0].data.clone();
            self.add_grad(input, |slot| {
                for ni in 0..n {
                    for d in 0..dout {
                        let up = &upstream[(ni * dout + d) * ho * wo..][..ho * wo];
                        for c in 0..cin {
                            let dst = &mut slot[(ni * cin + c) * h * w..][..h * w];
                            let kbase = (d * cin + c) * kh * kw;
                            for p in 0..kh {
                                for q in 0..kw {
                                    let kv = kdata[kbase + p * kw + q];
                                    if kv == 0.0 {
                                        continue;
                                    }
                                    scatter_shifted(dst, up, kv, ho, wo, h, w, stride, padding, p, q);
                                }
                            }
                        }
                    }
                }
            });
        }
        if self.needs(kernel) {
            let idata = self.nodes[input.0].data.clone();
            self.add_grad(kernel, |slot| {
                for ni in 0..n {
                    for d in 0..dout {
                        let up = &upstream[(ni * dout + d) * ho * wo..][..ho * wo];
                        for c in 0..cin {
                            let iplane = &idata[(ni * cin + c) * h * w..][..h * w];
                            let kbase = (d * cin + c) * kh * kw;
                            for p in 0..kh {
                                for q in 0..kw {
                                    slot[kbase + p * kw + q] += dot_shifted(
                                        up, iplane, ho, wo, h, w, stride, padding, p, q,
                                    );
                                }
                            }
                        }
                    }
                }
            });
        }
        self.add_grad(bias, |slot| {
            for ni in 0..n {
                for d in 0..dout {
                    let up = &upstream[(ni * dout + d) * ho * wo..][..ho * wo];
                    slot[d] += up.iter().sum::<f64>();
                }
            }
        });
    }

    fn backward_divergence(&mut self, kind: DivergenceKind, first: Var, second: Var, g: f64) {
        let shape = self.nodes[first.0].shape.clone();
        let (n, c) = (shape[0], shape[1]);
        let a = &self.nodes[first.0].data;
        let b = &self.nodes[second.0].data;
        let (d_first, d_second) = match kind {
            DivergenceKind::Kl => {
                let (lp, lq) = (log_softmax_rows(a, n, c), log_softmax_rows(b, n, c));
                let mut d_a = vec![0.0; n * c];
                let mut d_b = vec![0.0; n * c];
                for ni in 0..n {
                    let row = ni * c..(ni + 1) * c;
                    let kl_n: f64 = row
                        .clone()
                        .map(|i| lp[i].exp() * (lp[i] - lq[i]))
                        .sum();
                    for i in row {
                        let p = lp[i].exp();
                        let q = lq[i].exp();
                        d_a[i] = g * p * (lp[i] - lq[i] - kl_n) / n as f64;
                        d_b[i] = g * (q - p) / n as f64;
                    }
                }
                (d_a, d_b)
            }
            DivergenceKind::Js => {
                let (lp, lq) = (log_softmax_rows(a, n, c), log_softmax_rows(b, n, c));
                let mut d_a = vec![0.0; n * c];
                let mut d_b = vec![0.0; n * c];
                for ni in 0..n {
                    let row = ni * c..(ni + 1) * c;
                    // v_i = d JS / d p_i = 0.5 ln(p_i / m_i); chain through the
                    // softmax of each side.
                    let mut v_p = vec![0.0; c];
                    let mut v_q = vec![0.0; c];
                    for (k, i) in row.clone().enumerate() {
                        let p = lp[i].exp();
                        let q = lq[i].exp();
                        let m = 0.5 * (p + q);
                        v_p[k] = if p > 0.0 { 0.5 * (lp[i] - m.ln()) } else { 0.0 };
                        v_q[k] = if q > 0.0 { 0.5 * (lq[i] - m.ln()) } else { 0.0 };
                    }
                    let dot_p: f64 = row
                        .clone()
                        .enumerate()
                        .map(|(k, i)| v_p[k] * lp[i].exp())
                        .sum();
                    let dot_q: f64 = row
                        .clone()
                        .enumerate()
                        .map(|(k, i)| v_q[k] * lq[i].exp())
                        .sum();
                    for (k, i) in row.enumerate() {
                        d_a[i] = g * lp[i].exp() * (v_p[k] - dot_p) / n as f64;
                        d_b[i] = g * lq[i].exp() * (v_q[k] - dot_q) / n as f64;
                    }
                }
                (d_a, d_b)
            }
            DivergenceKind::Mse => {
                let (lp, lq) = (log_softmax_rows(a, n, c), log_softmax_rows(b, n, c));
                let scale = 2.0 / (n * c) as f64;
                let mut d_a = vec![0.0; n * c];
                let mut d_b = vec![0.0; n * c];
                for ni in 0..n {
                    let row = ni * c..(ni + 1) * c;
                    let mut v_p = vec![0.0; c];
                    let mut v_q = vec![0.0; c];
                    for (k, i) in row.clone().enumerate() {
                        let diff = lq[i].exp() - lp[i].exp();
                        v_p[k] = -scale * diff;
                        v_q[k] = scale * diff;
                    }
                    let dot_p: f64 = row
                        .clone()
                        .enumerate()
                        .map(|(k, i)| v_p[k] * lp[i].exp())
                        .sum();
                    let dot_q: f64 = row
                        .clone()
                        .enumerate()
                        .map(|(k, i)| v_q[k] * lq[i].exp())
                        .sum();
                    for (k, i) in row.enumerate() {
                        d_a[i] = g * lp[i].exp() * (v_p[k] - dot_p);
                        d_b[i] = g * lq[i].exp() * (v_q[k] - dot_q);
                    }
                }
                (d_a, d_b)
            }
            DivergenceKind::MseLogit => {
                let scale = 2.0 / (n * c) as f64;
                let d_a: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| -g * scale * (y - x)).collect();
                let d_b: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| g * scale * (y - x)).collect();
                (d_a, d_b)
            }
        };
        self.add_grad(first, |slot| {
            for (s, d) in slot.iter_mut().zip(&d_first) {
                *s += d;
            }
        });
        self.add_grad(second, |slot| {
            for (s, d) in slot.iter_mut().zip(&d_second) {
                *s += d;
            }
        });
    }
}

fn pool_dims(shape: &[usize], window: usize) -> Result<(usize, usize, usize, usize)> {
    if window == 0 {
        return Err(Error::Config("pool window must be positive".into()));
    }
    if shape.len() != 4 {
        return Err(Error::Dim(format!(
            "pooling expects [N,C,H,W], got {shape:?}"
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h % window != 0 || w % window != 0 {
        return Err(Error::Dim(format!(
            "pool window {window} does not divide spatial dims {h}x{w}"
        )));
    }
    Ok((n, c, h, w))
}

/// out[i,j] += kv * in[i*stride + p - padding, j*stride + q - padding]
/// over the output coordinates whose source lands inside the input.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_shifted(
    oplane: &mut [f64],
    iplane: &[f64],
    kv: f64,
    ho: usize,
    wo: usize,
    h: usize,
    w: usize,
    stride: usize,
    padding: usize,
    p: usize,
    q: usize,
) {
    let (lo_i, hi_i) = valid_range(ho, h, stride, padding, p);
    let (lo_j, hi_j) = valid_range(wo, w, stride, padding, q);
    if lo_i >= hi_i || lo_j >= hi_j {
        return;
    }
    for i in lo_i..hi_i {
        let y = i * stride + p - padding;
        let out_row = &mut oplane[i * wo + lo_j..i * wo + hi_j];
        if stride == 1 {
            let x0 = lo_j + q - padding;
            let in_row = &iplane[y * w + x0..y * w + x0 + (hi_j - lo_j)];
            for (o, &v) in out_row.iter_mut().zip(in_row) {
                *o += kv * v;
            }
        } else {
            for (idx, o) in out_row.iter_mut().enumerate() {
                let x = (lo_j + idx) * stride + q - padding;
                *o += kv * iplane[y * w + x];
            }
        }
    }
}

/// dst[i*stride + p - padding, j*stride + q - padding] += kv * up[i,j];
/// the transpose of `accumulate_shifted`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn scatter_shifted(
    dst: &mut [f64],
    up: &[f64],
    kv: f64,
    ho: usize,
    wo: usize,
    h: usize,
    w: usize,
    stride: usize,
    padding: usize,
    p: usize,
    q: usize,
) {
    let (lo_i, hi_i) = valid_range(ho, h, stride, padding, p);
    let (lo_j, hi_j) = valid_range(wo, w, stride, padding, q);
    if lo_i >= hi_i || lo_j >= hi_j {
        return;
    }
    for i in lo_i..hi_i {
        let y = i * stride + p - padding;
        let up_row = &up[i * wo + lo_j..i * wo + hi_j];
        if stride == 1 {
            let x0 = lo_j + q - padding;
            let dst_row = &mut dst[y * w + x0..y * w + x0 + (hi_j - lo_j)];
            for (d, &g) in dst_row.iter_mut().zip(up_row) {
                *d += kv * g;
            }
        } else {
            for (idx, &g) in up_row.iter().enumerate() {
                let x = (lo_j + idx) * stride + q - padding;
                dst[y * w + x] += kv * g;
            }
        }
    }
}

/// sum_{i,j} up[i,j] * in[i*stride + p - padding, j*stride + q - padding].
#[allow(clippy::too_many_arguments)]
#[inline]
fn dot_shifted(
    up: &[f64],
    iplane: &[f64],
    ho: usize,
    wo: usize,
    h: usize,
    w: usize,
    stride: usize,
    padding: usize,
    p: usize,
    q: usize,
) -> f64 {
    let (lo_i, hi_i) = valid_range(ho, h, stride, padding, p);
    let (lo_j, hi_j) = valid_range(wo, w, stride, padding, q);
    if lo_i >= hi_i || lo_j >= hi_j {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in lo_i..hi_i {
        let y = i * stride + p - padding;
        let up_row = &up[i * wo + lo_j..i * wo + hi_j];
        if stride == 1 {
            let x0 = lo_j + q - padding;
            let in_row = &iplane[y * w + x0..y * w + x0 + (hi_j - lo_j)];
            acc += up_row.iter().zip(in_row).map(|(&g, &v)| g * v).sum::<f64>();
        } else {
            for (idx, &g) in up_row.iter().enumerate() {
                let x = (lo_j + idx) * stride + q - padding;
                acc += g * iplane[y * w + x];
            }
        }
    }
    acc
}

/// Output index range [lo, hi) for which `i*stride + offset - padding` lands
/// in `[0, extent)`.
#[inline]
fn valid_range(out_extent: usize, extent: usize, stride: usize, padding: usize, offset: usize) -> (usize, usize) {
    let lo = if offset >= padding {
        0
    } else {
        (padding - offset).div_ceil(stride)
    };
    let hi = if extent + padding > offset {
        (((extent + padding - offset - 1) / stride) + 1).min(out_extent)
    } else {
        0
    };
    (lo, hi)
}

/// Row-wise log softmax with max subtraction, over a [n, c] buffer.
pub fn log_softmax_rows(data: &[f64], n: usize, c: usize) -> Vec<f64> {
    debug_assert_eq!(data.len(), n * c);
    let mut out = vec![0.0; n * c];
    for ni in 0..n {
        let row = &data[ni * c..][..c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for (o, &v) in out[ni * c..][..c].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

/// Row-wise softmax of a [N,C] tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "softmax_rows expects [N,C]");
    let logp = log_softmax_rows(logits.data(), shape[0], shape[1]);
    Tensor::from_vec(shape, logp.iter().map(|v| v.exp()).collect())
        .expect("softmax of finite logits is finite")
}
