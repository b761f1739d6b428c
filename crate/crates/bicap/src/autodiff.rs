//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value and enough context to run its backward rule. The tape is rebuilt for
//! every forward pass, which lets loss terms (cross-entropy, the entropy
//! penalty) compose freely. `backward` walks the tape once in reverse and
//! accumulates gradients into every trainable leaf.
//!
//! Quantizer ops carry their straight-through backward rules:
//! [`Graph::binarize_ste`] passes gradients where `|master| <= clip`, and
//! [`Graph::quantize_activation`] passes gradients on the clamped region
//! `[0, 1]`. The surrogate-entropy op differentiates through the true tanh
//! derivative instead.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_at, matmul_bt_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

struct ConvCtx {
    /// im2col matrix `[C*kh*kw, N*OH*OW]`, saved for the backward pass.
    cols: Vec<f64>,
}

struct BnCtx {
    mean: Vec<f64>,
    invstd: Vec<f64>,
}

struct EntropyFilterCtx {
    s: f64,
    delta: f64,
    p: f64,
    n_prob: f64,
    /// Gradient is defined only on the interior of the probability simplex.
    blocked: bool,
}

struct EntropyCtx {
    /// tanh(10^k * w) per in-scope layer, in `masters` order.
    surrogates: Vec<Vec<f64>>,
    filters: Vec<Vec<EntropyFilterCtx>>,
    total_filters: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Abs(Var),
    Sum(Var),
    Relu(Var),
    BinarizeSte { master: Var, clip: f64 },
    QuantAct { input: Var },
    Conv2d { input: Var, weight: Var, stride: usize, padding: usize, ctx: Option<ConvCtx> },
    Linear { input: Var, weight: Var, bias: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, invstd_eval: Option<Vec<f64>>, ctx: Option<BnCtx> },
    GlobalAvgPool { input: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    SurrogateMeanEntropy { masters: Vec<Var>, scale: f64, ctx: Option<EntropyCtx> },
}

/// Batch-norm mode: training normalizes by batch statistics and updates the
/// running estimates; evaluation normalizes by the running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    check_finite: bool,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new(), grad_enabled: true, check_finite: false, backward_done: false }
    }

    /// Inference-only tape: ops skip saving backward context.
    pub fn inference() -> Graph {
        Graph { nodes: Vec::new(), grad_enabled: false, check_finite: false, backward_done: false }
    }

    /// When set, every op output is scanned and a NaN/Inf returns an error.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-trainable input leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Trainable leaf: `backward` populates its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        let requires = self.grad_enabled;
        self.push_unchecked(value, Op::Leaf, requires)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(format!("{what} produced a NaN or Inf")));
        }
        Ok(self.push_unchecked(value, op, requires_grad && self.grad_enabled))
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    // ── Elementwise and reduction ops ─────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data).expect("add shape");
        let req = self.req(a) || self.req(b);
        self.push(out, Op::Add(a, b), req, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data).expect("mul shape");
        let req = self.req(a) || self.req(b);
        self.push(out, Op::Mul(a, b), req, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        let req = self.req(a);
        self.push(out, Op::Scale(a, c), req, "scale")
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        let req = self.req(a);
        self.push(out, Op::AddConst(a), req, "add_const")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        let req = self.req(a);
        self.push(out, Op::Abs(a), req, "abs")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().sum();
        let req = self.req(a);
        self.push(Tensor::scalar(total), Op::Sum(a), req, "sum")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        let req = self.req(a);
        self.push(out, Op::Relu(a), req, "relu")
    }

    // ── Quantizer ops (straight-through backward) ─────────────────────────

    /// Deterministic sign binarization with `sign(0) = +1`; backward is the
    /// clipped straight-through estimator.
    pub fn binarize_ste(&mut self, master: Var, clip: f64) -> Result<Var> {
        let out = self.value(master).map(|x| if x >= 0.0 { 1.0 } else { -1.0 });
        let req = self.req(master);
        self.push(out, Op::BinarizeSte { master, clip }, req, "binarize_ste")
    }

    /// Uniform quantization of `clamp(x, 0, 1)` onto `2^bits` levels; ties
    /// round half away from zero.
    pub fn quantize_activation(&mut self, input: Var, bits: u32) -> Result<Var> {
        if bits < 1 {
            return Err(Error::Config("activation bits must be >= 1".into()));
        }
        let levels = (1u64 << bits) as f64 - 1.0;
        let out = self.value(input).map(|x| (levels * x.clamp(0.0, 1.0)).round() / levels);
        let req = self.req(input);
        self.push(out, Op::QuantAct { input }, req, "quantize_activation")
    }

    // ── Network layers ────────────────────────────────────────────────────

    /// 2-D cross-correlation of `input [N,C,H,W]` with `weight [F,C,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let ishape = self.value(input).shape().to_vec();
        let wshape = self.value(weight).shape().to_vec();
        if ishape.len() != 4 || wshape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects 4-d input and weight, got input {ishape:?}, weight {wshape:?}"
            )));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (f, wc, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if c != wc {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {c} channels, weight expects {wc}"
            )));
        }
        if stride < 1 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let ckk = c * kh * kw;
        let np = n * oh * ow;

        let mut cols = vec![0.0; ckk * np];
        im2col(self.value(input).data(), n, c, h, w, kh, kw, stride, padding, oh, ow, &mut cols);

        // y_mat [F, N*OH*OW] = weight [F, CKK] @ cols, then scatter to [N,F,OH,OW].
        let mut y_mat = vec![0.0; f * np];
        matmul(&mut y_mat, self.value(weight).data(), &cols, f, ckk, np);
        let mut out = vec![0.0; n * f * oh * ow];
        let plane = oh * ow;
        for nn in 0..n {
            for ff in 0..f {
                let src = &y_mat[ff * np + nn * plane..ff * np + (nn + 1) * plane];
                out[(nn * f + ff) * plane..(nn * f + ff + 1) * plane].copy_from_slice(src);
            }
        }
        let out = Tensor::from_vec(&[n, f, oh, ow], out).expect("conv2d shape");

        let req = self.req(input) || self.req(weight);
        let ctx = if self.grad_enabled && req { Some(ConvCtx { cols }) } else { None };
        self.push(out, Op::Conv2d { input, weight, stride, padding, ctx }, req, "conv2d")
    }

    /// Affine map `input [N,D] @ weight [D,K] + bias [K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let ishape = self.value(input).shape().to_vec();
        let wshape = self.value(weight).shape().to_vec();
        let bshape = self.value(bias).shape().to_vec();
        if ishape.len() != 2 || wshape.len() != 2 {
            return Err(Error::Shape(format!(
                "linear expects 2-d input and weight, got {ishape:?} and {wshape:?}"
            )));
        }
        let (n, d) = (ishape[0], ishape[1]);
        let (wd, k) = (wshape[0], wshape[1]);
        if d != wd {
            return Err(Error::Shape(format!(
                "linear inner dimensions disagree: input is [.., {d}], weight is [{wd}, ..]"
            )));
        }
        if bshape != [k] {
            return Err(Error::Shape(format!("linear bias {bshape:?} does not match [{k}]")));
        }
        let mut out = vec![0.0; n * k];
        matmul(&mut out, self.value(input).data(), self.value(weight).data(), n, d, k);
        let bias_data = self.value(bias).data();
        for row in out.chunks_exact_mut(k) {
            for (y, b) in row.iter_mut().zip(bias_data) {
                *y += b;
            }
        }
        let out = Tensor::from_vec(&[n, k], out).expect("linear shape");
        let req = self.req(input) || self.req(weight) || self.req(bias);
        self.push(out, Op::Linear { input, weight, bias }, req, "linear")
    }

    /// Channelwise batch normalization over `[N,C,H,W]` or `[N,C]` input.
    ///
    /// In train mode the running estimates are updated in place with the
    /// configured momentum (unbiased variance, matching common framework
    /// conventions); parameters stay full precision.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        momentum: f64,
        eps: f64,
        mode: BnMode,
    ) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let (n, c, spatial) = match shape.len() {
            4 => (shape[0], shape[1], shape[2] * shape[3]),
            2 => (shape[0], shape[1], 1),
            _ => {
                return Err(Error::Shape(format!("batch_norm expects 2-d or 4-d input, got {shape:?}")))
            }
        };
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!(
                "batch_norm channel dim {c} does not match gamma/beta of {}/{} elements",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape("batch_norm running stats length mismatch".into()));
        }
        if mode == BnMode::Train && n == 0 {
            return Err(Error::Config("batch_norm: zero-size batch in train mode".into()));
        }
        let m = n * spatial;

        let x = self.value(input).data();
        let (mean, invstd) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for nn in 0..n {
                    for cc in 0..c {
                        let base = (nn * c + cc) * spatial;
                        let mut s = 0.0;
                        for v in &x[base..base + spatial] {
                            s += v;
                        }
                        mean[cc] += s;
                    }
                }
                for v in mean.iter_mut() {
                    *v /= m as f64;
                }
                for nn in 0..n {
                    for cc in 0..c {
                        let base = (nn * c + cc) * spatial;
                        let mu = mean[cc];
                        let mut s = 0.0;
                        for v in &x[base..base + spatial] {
                            let d = v - mu;
                            s += d * d;
                        }
                        var[cc] += s;
                    }
                }
                for v in var.iter_mut() {
                    *v /= m as f64;
                }
                let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
                for cc in 0..c {
                    running_mean[cc] = (1.0 - momentum) * running_mean[cc] + momentum * mean[cc];
                    running_var[cc] = (1.0 - momentum) * running_var[cc] + momentum * var[cc] * unbias;
                }
                let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (mean, invstd)
            }
            BnMode::Eval => {
                let invstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (running_mean.to_vec(), invstd)
            }
        };

        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; x.len()];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * spatial;
                let (mu, is, gc, bc) = (mean[cc], invstd[cc], g[cc], b[cc]);
                for i in base..base + spatial {
                    out[i] = gc * (x[i] - mu) * is + bc;
                }
            }
        }
        let out = Tensor::from_vec(&shape, out).expect("batch_norm shape");

        let req = self.req(input) || self.req(gamma) || self.req(beta);
        let (ctx, invstd_eval) = if self.grad_enabled && req {
            match mode {
                BnMode::Train => (Some(BnCtx { mean, invstd }), None),
                BnMode::Eval => (Some(BnCtx { mean, invstd: invstd.clone() }), Some(invstd)),
            }
        } else {
            (None, None)
        };
        self.push(out, Op::BatchNorm { input, gamma, beta, invstd_eval, ctx }, req, "batch_norm")
    }

    /// Mean over the spatial dimensions: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool expects 4-d input, got {shape:?}")));
        }
        let (n, c, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let base = i * spatial;
            let mut s = 0.0;
            for v in &x[base..base + spatial] {
                s += v;
            }
            *o = s / spatial as f64;
        }
        let out = Tensor::from_vec(&[n, c], out).expect("gap shape");
        let req = self.req(input);
        self.push(out, Op::GlobalAvgPool { input }, req, "global_avg_pool")
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max subtraction. Returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("softmax_cross_entropy expects [N,K] logits, got {shape:?}")));
        }
        let (n, k) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(Error::Shape(format!("{n} logit rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Config(format!("label {bad} out of range for {k} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            total += -(probs[i * k + label].ln());
        }
        let loss = Tensor::scalar(total / n as f64);
        let req = self.req(logits);
        let labels = labels.to_vec();
        self.push(loss, Op::SoftmaxCrossEntropy { logits, probs, labels }, req, "softmax_cross_entropy")
    }

    /// Mean per-filter Shannon entropy of the tanh surrogate
    /// `tanh(10^k * w)`, over every tensor in `masters`. The leading
    /// dimension of each tensor indexes filters. Returns a scalar in `[0,1]`;
    /// backward differentiates through the true tanh derivative.
    pub fn surrogate_mean_entropy(&mut self, masters: &[Var], k: i32) -> Result<Var> {
        if masters.is_empty() {
            return Err(Error::Config("surrogate_mean_entropy: empty scope".into()));
        }
        let scale = 10f64.powi(k);
        let mut surrogates = Vec::with_capacity(masters.len());
        let mut filters = Vec::with_capacity(masters.len());
        let mut total_filters = 0usize;
        let mut h_sum = 0.0;
        for &mv in masters {
            let t = self.value(mv);
            let shape = t.shape();
            if shape.is_empty() || t.numel() == 0 {
                return Err(Error::Shape("surrogate_mean_entropy: empty weight tensor".into()));
            }
            let f = shape[0];
            let n = t.numel() / f;
            let surr: Vec<f64> = t.data().iter().map(|&x| (scale * x).tanh()).collect();
            let mut layer_filters = Vec::with_capacity(f);
            for fi in 0..f {
                let slice = &surr[fi * n..(fi + 1) * n];
                let (s, delta) = sum_abs_and_signed(slice);
                let ctx = entropy_filter_ctx(s, delta);
                h_sum += binary_entropy_clamped(ctx.p, ctx.n_prob);
                layer_filters.push(ctx);
            }
            total_filters += f;
            surrogates.push(surr);
            filters.push(layer_filters);
        }
        let mean = h_sum / total_filters as f64;
        let req = masters.iter().any(|&m| self.req(m));
        let ctx = if self.grad_enabled && req {
            Some(EntropyCtx { surrogates, filters, total_filters })
        } else {
            None
        };
        self.push(
            Tensor::scalar(mean),
            Op::SurrogateMeanEntropy { masters: masters.to_vec(), scale, ctx },
            req,
            "surrogate_mean_entropy",
        )
    }

    // ── Backward ──────────────────────────────────────────────────────────

    fn add_grad_slice(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let grad = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        for (g, d) in grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Run the backward pass from a scalar loss, accumulating gradients into
    /// every trainable leaf that contributed to it. Consumes the tape's
    /// backward context; calling it a second time on the same graph is an
    /// error (rebuild the forward pass instead).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Config(
                "backward called twice on the same tape; re-run the forward pass".into(),
            ));
        }
        if !self.grad_enabled {
            return Err(Error::Config("backward on an inference-only tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Config("backward: loss was not produced by this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            // Loss does not depend on any trainable leaf; all gradients are zero.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            let grad_out = self.nodes[id].grad.take().expect("grad present");
            self.backward_op(id, &op, grad_out.data());
            self.nodes[id].grad = Some(grad_out);
        }
        Ok(())
    }

    fn backward_op(&mut self, id: usize, op: &Op, gout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad_slice(*a, gout);
                self.add_grad_slice(*b, gout);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> =
                    gout.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> =
                    gout.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                self.add_grad_slice(*a, &da);
                self.add_grad_slice(*b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = gout.iter().map(|g| g * c).collect();
                self.add_grad_slice(*a, &da);
            }
            Op::AddConst(a) => {
                self.add_grad_slice(*a, gout);
            }
            Op::Abs(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| g * sgn(*x))
                    .collect();
                self.add_grad_slice(*a, &da);
            }
            Op::Sum(a) => {
                let da = vec![gout[0]; self.value(*a).numel()];
                self.add_grad_slice(*a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.add_grad_slice(*a, &da);
            }
            Op::BinarizeSte { master, clip } => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(self.value(*master).data())
                    .map(|(g, x)| if x.abs() <= *clip { *g } else { 0.0 })
                    .collect();
                self.add_grad_slice(*master, &da);
            }
            Op::QuantAct { input } => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(self.value(*input).data())
                    .map(|(g, x)| if (0.0..=1.0).contains(x) { *g } else { 0.0 })
                    .collect();
                self.add_grad_slice(*input, &da);
            }
            Op::Conv2d { input, weight, stride, padding, ctx } => {
                self.backward_conv2d(id, *input, *weight, *stride, *padding, ctx.as_ref(), gout);
            }
            Op::Linear { input, weight, bias } => {
                let (n, d) = {
                    let s = self.value(*input).shape();
                    (s[0], s[1])
                };
                let k = self.value(*weight).shape()[1];
                if self.req(*input) {
                    let mut dx = vec![0.0; n * d];
                    // dX [N,D] = dY [N,K] @ Wᵀ ([D,K] transposed)
                    matmul_bt_acc(&mut dx, gout, self.value(*weight).data(), n, k, d);
                    self.add_grad_slice(*input, &dx);
                }
                if self.req(*weight) {
                    let mut dw = vec![0.0; d * k];
                    // dW [D,K] = Xᵀ @ dY
                    matmul_at(&mut dw, self.value(*input).data(), gout, d, n, k);
                    self.add_grad_slice(*weight, &dw);
                }
                if self.req(*bias) {
                    let mut db = vec![0.0; k];
                    for row in gout.chunks_exact(k) {
                        for (acc, g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    self.add_grad_slice(*bias, &db);
                }
            }
            Op::BatchNorm { input, gamma, beta, invstd_eval, ctx } => {
                let ctx = ctx.as_ref().expect("batch_norm backward without context");
                self.backward_batch_norm(*input, *gamma, *beta, invstd_eval.as_deref(), ctx, gout);
            }
            Op::GlobalAvgPool { input } => {
                let shape = self.value(*input).shape().to_vec();
                let spatial = shape[2] * shape[3];
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (i, g) in gout.iter().enumerate() {
                    let v = g / spatial as f64;
                    for d in &mut dx[i * spatial..(i + 1) * spatial] {
                        *d = v;
                    }
                }
                self.add_grad_slice(*input, &dx);
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let n = labels.len();
                let k = probs.len() / n;
                let gscale = gout[0] / n as f64;
                let mut dl = vec![0.0; probs.len()];
                for (i, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dl[i * k + j] = gscale * (probs[i * k + j] - onehot);
                    }
                }
                self.add_grad_slice(*logits, &dl);
            }
            Op::SurrogateMeanEntropy { masters, scale, ctx } => {
                let ctx = ctx.as_ref().expect("surrogate_mean_entropy backward without context");
                let coef = gout[0] / ctx.total_filters as f64;
                for (li, &mv) in masters.iter().enumerate() {
                    if !self.req(mv) {
                        continue;
                    }
                    let surr = &ctx.surrogates[li];
                    let fstats = &ctx.filters[li];
                    let f = fstats.len();
                    let n = surr.len() / f;
                    let mut dm = vec![0.0; surr.len()];
                    for (fi, st) in fstats.iter().enumerate() {
                        if st.blocked {
                            continue;
                        }
                        let dh_dp = (st.n_prob / st.p).log2();
                        let dp_ds = -st.delta / (2.0 * st.s * st.s);
                        let dp_dd = 1.0 / (2.0 * st.s);
                        for i in fi * n..(fi + 1) * n {
                            let t = surr[i];
                            let dt = coef * dh_dp * (dp_ds * sgn(t) + dp_dd);
                            dm[i] = dt * scale * (1.0 - t * t);
                        }
                    }
                    self.add_grad_slice(mv, &dm);
                }
            }
        }
    }

    fn backward_conv2d(
        &mut self,
        _id: usize,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
        ctx: Option<&ConvCtx>,
        gout: &[f64],
    ) {
        let ishape = self.value(input).shape().to_vec();
        let wshape = self.value(weight).shape().to_vec();
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (f, kh, kw) = (wshape[0], wshape[2], wshape[3]);
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let ckk = c * kh * kw;
        let np = n * oh * ow;
        let plane = oh * ow;

        // Gather dY [N,F,OH,OW] into matrix layout [F, N*OH*OW].
        let mut dy_mat = vec![0.0; f * np];
        for nn in 0..n {
            for ff in 0..f {
                let src = &gout[(nn * f + ff) * plane..(nn * f + ff + 1) * plane];
                dy_mat[ff * np + nn * plane..ff * np + (nn + 1) * plane].copy_from_slice(src);
            }
        }

        if self.req(weight) {
            let cols = &ctx.expect("conv2d backward without saved cols").cols;
            let mut dw = vec![0.0; f * ckk];
            // dW [F,CKK] = dY [F,NP] @ colsᵀ ([CKK,NP] transposed)
            matmul_bt_acc(&mut dw, &dy_mat, cols, f, np, ckk);
            self.add_grad_slice(weight, &dw);
        }
        if self.req(input) {
            let mut dcols = vec![0.0; ckk * np];
            // dcols [CKK,NP] = Wᵀ @ dY
            matmul_at(&mut dcols, self.value(weight).data(), &dy_mat, ckk, f, np);
            let mut dx = vec![0.0; n * c * h * w];
            col2im_acc(&dcols, n, c, h, w, kh, kw, stride, padding, oh, ow, &mut dx);
            self.add_grad_slice(input, &dx);
        }
    }

    fn backward_batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        invstd_eval: Option<&[f64]>,
        ctx: &BnCtx,
        gout: &[f64],
    ) {
        let shape = self.value(input).shape().to_vec();
        let (n, c, spatial) = match shape.len() {
            4 => (shape[0], shape[1], shape[2] * shape[3]),
            _ => (shape[0], shape[1], 1),
        };
        let m = (n * spatial) as f64;
        let x = self.value(input).data();
        let g = self.value(gamma).data();

        // Channel reductions: sum(dy) and sum(dy * xhat).
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * spatial;
                let (mu, is) = (ctx.mean[cc], ctx.invstd[cc]);
                let mut s0 = 0.0;
                let mut s1 = 0.0;
                for i in base..base + spatial {
                    let xhat = (x[i] - mu) * is;
                    s0 += gout[i];
                    s1 += gout[i] * xhat;
                }
                sum_dy[cc] += s0;
                sum_dy_xhat[cc] += s1;
            }
        }

        if self.req(input) {
            let mut dx = vec![0.0; x.len()];
            match invstd_eval {
                // Eval mode: running stats are constants.
                Some(invstd) => {
                    for nn in 0..n {
                        for cc in 0..c {
                            let base = (nn * c + cc) * spatial;
                            let coef = g[cc] * invstd[cc];
                            for i in base..base + spatial {
                                dx[i] = gout[i] * coef;
                            }
                        }
                    }
                }
                // Train mode: batch statistics depend on the input.
                None => {
                    for nn in 0..n {
                        for cc in 0..c {
                            let base = (nn * c + cc) * spatial;
                            let (mu, is) = (ctx.mean[cc], ctx.invstd[cc]);
                            let (s0, s1) = (sum_dy[cc] / m, sum_dy_xhat[cc] / m);
                            let coef = g[cc] * is;
                            for i in base..base + spatial {
                                let xhat = (x[i] - mu) * is;
                                dx[i] = coef * (gout[i] - s0 - xhat * s1);
                            }
                        }
                    }
                }
            }
            self.add_grad_slice(input, &dx);
        }
        if self.req(gamma) {
            self.add_grad_slice(gamma, &sum_dy_xhat);
        }
        if self.req(beta) {
            self.add_grad_slice(beta, &sum_dy);
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Guard constants for the entropy computation: an all-zero surrogate filter
/// falls back to the balanced distribution, and probabilities are clamped
/// away from 0/1 before logs.
pub(crate) const ENTROPY_S_GUARD: f64 = 1e-12;
pub(crate) const ENTROPY_PROB_CLAMP: f64 = 1e-12;

fn entropy_filter_ctx(s: f64, delta: f64) -> EntropyFilterCtx {
    if s < ENTROPY_S_GUARD {
        return EntropyFilterCtx { s, delta, p: 0.5, n_prob: 0.5, blocked: true };
    }
    let p_raw = (s + delta) / (2.0 * s);
    let n_raw = (s - delta) / (2.0 * s);
    let p = p_raw.clamp(ENTROPY_PROB_CLAMP, 1.0 - ENTROPY_PROB_CLAMP);
    let n_prob = n_raw.clamp(ENTROPY_PROB_CLAMP, 1.0 - ENTROPY_PROB_CLAMP);
    // The clamp flattens the gradient at the simplex boundary.
    let blocked = p != p_raw || n_prob != n_raw;
    EntropyFilterCtx { s, delta, p, n_prob, blocked }
}

fn binary_entropy_clamped(p: f64, n_prob: f64) -> f64 {
    -(p * p.log2() + n_prob * n_prob.log2())
}

fn sum_abs_and_signed(xs: &[f64]) -> (f64, f64) {
    let mut s = 0.0;
    let mut d = 0.0;
    for &x in xs {
        s += x.abs();
        d += x;
    }
    (s, d)
}

/// Unfold `input [N,C,H,W]` into `cols [C*kh*kw, N*OH*OW]` (zero padding).
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    input: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let np = n * oh * ow;
    debug_assert_eq!(cols.len(), c * kh * kw * np);
    for cc in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((cc * kh + ki) * kw + kj) * np;
                for nn in 0..n {
                    let in_base = (nn * c + cc) * h * w;
                    let out_base = row + nn * oh * ow;
                    for oi in 0..oh {
                        let ih = (oi * stride + ki) as isize - padding as isize;
                        let dst = &mut cols[out_base + oi * ow..out_base + (oi + 1) * ow];
                        if ih < 0 || ih >= h as isize {
                            for v in dst.iter_mut() {
                                *v = 0.0;
                            }
                            continue;
                        }
                        let src_row = in_base + ih as usize * w;
                        for (oj, v) in dst.iter_mut().enumerate() {
                            let iw = (oj * stride + kj) as isize - padding as isize;
                            *v = if iw < 0 || iw >= w as isize {
                                0.0
                            } else {
                                input[src_row + iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Fold `cols`-shaped gradients back onto the input with accumulation.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    dcols: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dinput: &mut [f64],
) {
    let np = n * oh * ow;
    for cc in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((cc * kh + ki) * kw + kj) * np;
                for nn in 0..n {
                    let in_base = (nn * c + cc) * h * w;
                    let src_base = row + nn * oh * ow;
                    for oi in 0..oh {
                        let ih = (oi * stride + ki) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst_row = in_base + ih as usize * w;
                        let src = &dcols[src_base + oi * ow..src_base + (oi + 1) * ow];
                        for (oj, v) in src.iter().enumerate() {
                            let iw = (oj * stride + kj) as isize - padding as isize;
                            if iw >= 0 && iw < w as isize {
                                dinput[dst_row + iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
