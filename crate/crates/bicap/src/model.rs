//! Network constructors: the CIFAR-style pre-activation ResNet-18 (at full
//! and reduced width) and a small two-binary-conv CNN for fast tests.
//!
//! The first convolution and the final classifier are always full precision.
//! When `binarize` is set, every other convolution is binary-tagged: its
//! forward pass consumes `sign(master)` via the straight-through tape op,
//! while the optimizer updates the real-valued master. Binary-layer inputs
//! pass through the uniform activation quantizer; full-precision models use
//! ReLU in the same positions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnMode, Graph, Var};
use crate::error::{Error, Result};
use crate::quant::{binarize, tanh_surrogate, QuantConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    PreactResNet18,
    LenetBinary,
}

impl Arch {
    pub fn id(&self) -> &'static str {
        match self {
            Arch::PreactResNet18 => "preact_resnet18",
            Arch::LenetBinary => "lenet_binary",
        }
    }

    pub fn from_id(id: &str) -> Result<Arch> {
        match id {
            "preact_resnet18" => Ok(Arch::PreactResNet18),
            "lenet_binary" => Ok(Arch::LenetBinary),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub num_classes: usize,
    /// Width multiplier denominator: channel widths are divided by this
    /// (1, 2, 4, or 8).
    pub width_den: usize,
    pub in_channels: usize,
    pub binarize: bool,
    pub quant: QuantConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::PreactResNet18,
            num_classes: 10,
            width_den: 1,
            in_channels: 3,
            binarize: true,
            quant: QuantConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.width_den, 1 | 2 | 4 | 8) {
            return Err(Error::Config(format!(
                "width multiplier 1/{} not supported (use 1, 1/2, 1/4, 1/8)",
                self.width_den
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        self.quant.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Full,
    Binary,
}

/// Master weights plus their derived binary and surrogate views.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub master: Tensor,
    pub binary: Tensor,
    pub surrogate: Tensor,
    pub k: i32,
}

impl LayerWeights {
    pub fn new(master: Tensor, k: i32) -> Result<LayerWeights> {
        let binary = binarize(&master)?;
        let surrogate = tanh_surrogate(&master, k);
        Ok(LayerWeights { master, binary, surrogate, k })
    }

    /// Re-derive the binary and surrogate views after a master update.
    pub fn refresh(&mut self) -> Result<()> {
        self.binary = binarize(&self.master)?;
        self.surrogate = tanh_surrogate(&self.master, self.k);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub weights: LayerWeights,
    pub precision: Precision,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    fn new(name: String, channels: usize) -> BatchNormLayer {
        BatchNormLayer {
            name,
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub name: String,
    /// `[in_features, out_features]`, row-major.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct PreactBlock {
    pub bn1: BatchNormLayer,
    pub conv1: ConvLayer,
    pub bn2: BatchNormLayer,
    pub conv2: ConvLayer,
    pub shortcut: Option<ConvLayer>,
}

#[derive(Debug, Clone)]
pub enum Body {
    Resnet(Vec<PreactBlock>),
    Lenet(Vec<(BatchNormLayer, ConvLayer)>),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub stem: ConvLayer,
    pub body: Body,
    pub head_bn: Option<BatchNormLayer>,
    pub classifier: LinearLayer,
    /// Per-channel normalization constants of the training data, recorded
    /// for checkpointing.
    pub norm_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// One parameter slot in the registry walk.
#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    /// Master of a binary-tagged conv: clamped to [-1, 1] after updates.
    pub clamp: bool,
    /// Counts toward the 1-bit storage budget.
    pub binary_weight: bool,
}

/// Everything the trainer needs back from a forward pass.
pub struct ForwardOut {
    pub logits: Var,
    /// Trainable leaves, aligned with the `for_each_param` walk order.
    pub params: Vec<Var>,
    pub param_meta: Vec<ParamMeta>,
    /// Master leaves of in-scope binary conv layers, with their names.
    pub binary_masters: Vec<(String, Var)>,
    /// Weight tensor each convolution actually consumed (diagnostics).
    pub conv_taps: Vec<(String, Var)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryReport {
    pub fp_bytes: usize,
    pub binary_bytes: usize,
    pub compression_ratio: f64,
}

fn kaiming_conv(shape: &[usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    Tensor::randn(shape, (2.0 / fan_in).sqrt(), rng)
}

fn conv_layer(
    name: &str,
    shape: [usize; 4],
    stride: usize,
    padding: usize,
    precision: Precision,
    k: i32,
    rng: &mut ChaCha8Rng,
) -> Result<ConvLayer> {
    let master = kaiming_conv(&shape, rng);
    Ok(ConvLayer {
        name: name.to_string(),
        weights: LayerWeights::new(master, k)?,
        precision,
        stride,
        padding,
    })
}

/// Build a model for the given config with seeded initialization.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    match config.arch {
        Arch::PreactResNet18 => build_preact_resnet18(config, seed),
        Arch::LenetBinary => build_lenet_binary(config, seed),
    }
}

/// CIFAR-variant pre-activation ResNet-18: 3x3 full-precision stem, four
/// stages of two pre-activation basic blocks at widths 64/128/256/512
/// divided by the width denominator, global average pooling, and a
/// full-precision classifier.
pub fn build_preact_resnet18(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    if config.arch != Arch::PreactResNet18 {
        return Err(Error::Config("config.arch does not name preact_resnet18".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.quant.k;
    let body_prec = if config.binarize { Precision::Binary } else { Precision::Full };
    let widths: Vec<usize> = [64, 128, 256, 512].iter().map(|w| w / config.width_den).collect();

    let stem = conv_layer(
        "stem.conv",
        [widths[0], config.in_channels, 3, 3],
        1,
        1,
        Precision::Full,
        k,
        &mut rng,
    )?;

    let mut blocks = Vec::new();
    let mut in_planes = widths[0];
    for (stage, &planes) in widths.iter().enumerate() {
        for block_idx in 0..2 {
            let stride = if stage > 0 && block_idx == 0 { 2 } else { 1 };
            let prefix = format!("layer{}.{}", stage + 1, block_idx);
            let bn1 = BatchNormLayer::new(format!("{prefix}.bn1"), in_planes);
            let conv1 = conv_layer(
                &format!("{prefix}.conv1"),
                [planes, in_planes, 3, 3],
                stride,
                1,
                body_prec,
                k,
                &mut rng,
            )?;
            let bn2 = BatchNormLayer::new(format!("{prefix}.bn2"), planes);
            let conv2 = conv_layer(
                &format!("{prefix}.conv2"),
                [planes, planes, 3, 3],
                1,
                1,
                body_prec,
                k,
                &mut rng,
            )?;
            let shortcut = if stride != 1 || in_planes != planes {
                Some(conv_layer(
                    &format!("{prefix}.shortcut"),
                    [planes, in_planes, 1, 1],
                    stride,
                    0,
                    body_prec,
                    k,
                    &mut rng,
                )?)
            } else {
                None
            };
            blocks.push(PreactBlock { bn1, conv1, bn2, conv2, shortcut });
            in_planes = planes;
        }
    }

    let feat = widths[3];
    let classifier = LinearLayer {
        name: "fc".to_string(),
        weight: Tensor::randn(&[feat, config.num_classes], 1.0 / (feat as f64).sqrt(), &mut rng),
        bias: Tensor::zeros(&[config.num_classes]),
    };

    Ok(Model {
        config: config.clone(),
        stem,
        body: Body::Resnet(blocks),
        head_bn: None,
        classifier,
        norm_stats: None,
    })
}

/// Small test vehicle: full-precision 3x3 stem, two binary 3x3 stride-2
/// convolutions, a head batch norm, global average pooling, and a
/// full-precision classifier. Runs on 28x28 and 32x32 inputs.
pub fn build_lenet_binary(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    if config.arch != Arch::LenetBinary {
        return Err(Error::Config("config.arch does not name lenet_binary".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.quant.k;
    let body_prec = if config.binarize { Precision::Binary } else { Precision::Full };

    let stem =
        conv_layer("stem.conv", [16, config.in_channels, 3, 3], 1, 1, Precision::Full, k, &mut rng)?;
    let layers = vec![
        (
            BatchNormLayer::new("block0.bn".to_string(), 16),
            conv_layer("block0.conv", [32, 16, 3, 3], 2, 1, body_prec, k, &mut rng)?,
        ),
        (
            BatchNormLayer::new("block1.bn".to_string(), 32),
            conv_layer("block1.conv", [64, 32, 3, 3], 2, 1, body_prec, k, &mut rng)?,
        ),
    ];
    let head_bn = Some(BatchNormLayer::new("head.bn".to_string(), 64));
    let classifier = LinearLayer {
        name: "fc".to_string(),
        weight: Tensor::randn(&[64, config.num_classes], 1.0 / 8.0, &mut rng),
        bias: Tensor::zeros(&[config.num_classes]),
    };

    Ok(Model {
        config: config.clone(),
        stem,
        body: Body::Lenet(layers),
        head_bn,
        classifier,
        norm_stats: None,
    })
}

impl Model {
    /// Visit every trainable parameter in the fixed registry order.
    pub fn for_each_param(&self, mut f: impl FnMut(ParamMeta, &Tensor)) {
        let conv = |c: &ConvLayer, f: &mut dyn FnMut(ParamMeta, &Tensor)| {
            f(
                ParamMeta {
                    name: format!("{}.weight", c.name),
                    clamp: c.precision == Precision::Binary,
                    binary_weight: c.precision == Precision::Binary,
                },
                &c.weights.master,
            );
        };
        let bn = |b: &BatchNormLayer, f: &mut dyn FnMut(ParamMeta, &Tensor)| {
            f(plain(format!("{}.gamma", b.name)), &b.gamma);
            f(plain(format!("{}.beta", b.name)), &b.beta);
        };
        conv(&self.stem, &mut f);
        match &self.body {
            Body::Resnet(blocks) => {
                for b in blocks {
                    bn(&b.bn1, &mut f);
                    conv(&b.conv1, &mut f);
                    bn(&b.bn2, &mut f);
                    conv(&b.conv2, &mut f);
                    if let Some(sc) = &b.shortcut {
                        conv(sc, &mut f);
                    }
                }
            }
            Body::Lenet(layers) => {
                for (b, c) in layers {
                    bn(b, &mut f);
                    conv(c, &mut f);
                }
            }
        }
        if let Some(hb) = &self.head_bn {
            bn(hb, &mut f);
        }
        f(plain(format!("{}.weight", self.classifier.name)), &self.classifier.weight);
        f(plain(format!("{}.bias", self.classifier.name)), &self.classifier.bias);
    }

    /// Mutable variant of [`Model::for_each_param`], same order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(ParamMeta, &mut Tensor)) {
        let conv = |c: &mut ConvLayer, f: &mut dyn FnMut(ParamMeta, &mut Tensor)| {
            f(
                ParamMeta {
                    name: format!("{}.weight", c.name),
                    clamp: c.precision == Precision::Binary,
                    binary_weight: c.precision == Precision::Binary,
                },
                &mut c.weights.master,
            );
        };
        let bn = |b: &mut BatchNormLayer, f: &mut dyn FnMut(ParamMeta, &mut Tensor)| {
            f(plain(format!("{}.gamma", b.name)), &mut b.gamma);
            f(plain(format!("{}.beta", b.name)), &mut b.beta);
        };
        conv(&mut self.stem, &mut f);
        match &mut self.body {
            Body::Resnet(blocks) => {
                for b in blocks {
                    bn(&mut b.bn1, &mut f);
                    conv(&mut b.conv1, &mut f);
                    bn(&mut b.bn2, &mut f);
                    conv(&mut b.conv2, &mut f);
                    if let Some(sc) = &mut b.shortcut {
                        conv(sc, &mut f);
                    }
                }
            }
            Body::Lenet(layers) => {
                for (b, c) in layers {
                    bn(b, &mut f);
                    conv(c, &mut f);
                }
            }
        }
        if let Some(hb) = &mut self.head_bn {
            bn(hb, &mut f);
        }
        f(plain(format!("{}.weight", self.classifier.name)), &mut self.classifier.weight);
        f(plain(format!("{}.bias", self.classifier.name)), &mut self.classifier.bias);
    }

    /// Visit batch-norm running statistics (buffers, not parameters), in
    /// registry order.
    pub fn for_each_buffer(&self, mut f: impl FnMut(String, &Tensor)) {
        let bn = |b: &BatchNormLayer, f: &mut dyn FnMut(String, &Tensor)| {
            f(format!("{}.running_mean", b.name), &b.running_mean);
            f(format!("{}.running_var", b.name), &b.running_var);
        };
        match &self.body {
            Body::Resnet(blocks) => {
                for b in blocks {
                    bn(&b.bn1, &mut f);
                    bn(&b.bn2, &mut f);
                }
            }
            Body::Lenet(layers) => {
                for (b, _) in layers {
                    bn(b, &mut f);
                }
            }
        }
        if let Some(hb) = &self.head_bn {
            bn(hb, &mut f);
        }
    }

    pub fn for_each_buffer_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        let bn = |b: &mut BatchNormLayer, f: &mut dyn FnMut(String, &mut Tensor)| {
            f(format!("{}.running_mean", b.name), &mut b.running_mean);
            f(format!("{}.running_var", b.name), &mut b.running_var);
        };
        match &mut self.body {
            Body::Resnet(blocks) => {
                for b in blocks {
                    bn(&mut b.bn1, &mut f);
                    bn(&mut b.bn2, &mut f);
                }
            }
            Body::Lenet(layers) => {
                for (b, _) in layers {
                    bn(b, &mut f);
                }
            }
        }
        if let Some(hb) = &mut self.head_bn {
            bn(hb, &mut f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t| n += t.numel());
        n
    }

    pub fn binary_weight_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|meta, t| {
            if meta.binary_weight {
                n += t.numel();
            }
        });
        n
    }

    /// Binary-tagged conv layers as `(name, weights)` pairs, registry order.
    pub fn binary_conv_layers(&self) -> Vec<(&str, &LayerWeights)> {
        let mut layers: Vec<(&str, &LayerWeights)> = Vec::new();
        if self.stem.precision == Precision::Binary {
            layers.push((self.stem.name.as_str(), &self.stem.weights));
        }
        match &self.body {
            Body::Resnet(blocks) => {
                for b in blocks {
                    for c in [&b.conv1, &b.conv2] {
                        if c.precision == Precision::Binary {
                            layers.push((c.name.as_str(), &c.weights));
                        }
                    }
                    if let Some(sc) = &b.shortcut {
                        if sc.precision == Precision::Binary {
                            layers.push((sc.name.as_str(), &sc.weights));
                        }
                    }
                }
            }
            Body::Lenet(body) => {
                for (_, c) in body {
                    if c.precision == Precision::Binary {
                        layers.push((c.name.as_str(), &c.weights));
                    }
                }
            }
        }
        layers
    }

    /// Re-derive every binary/surrogate view from the masters.
    pub fn refresh_weights(&mut self) -> Result<()> {
        self.stem.weights.refresh()?;
        match &mut self.body {
            Body::Resnet(blocks) => {
                for b in blocks {
                    b.conv1.weights.refresh()?;
                    b.conv2.weights.refresh()?;
                    if let Some(sc) = &mut b.shortcut {
                        sc.weights.refresh()?;
                    }
                }
            }
            Body::Lenet(layers) => {
                for (_, c) in layers {
                    c.weights.refresh()?;
                }
            }
        }
        Ok(())
    }

    /// Inference-model storage accounting (4-byte full-precision parameters,
    /// 1-bit binary weights).
    pub fn memory_report(&self) -> MemoryReport {
        let total = self.param_count();
        let binary = self.binary_weight_count();
        let fp_bytes = 4 * total;
        let binary_bytes = binary.div_ceil(8) + 4 * (total - binary);
        let compression_ratio = fp_bytes as f64 / binary_bytes as f64;
        MemoryReport { fp_bytes, binary_bytes, compression_ratio }
    }

    /// Assemble the forward pass on the tape. Train mode updates batch-norm
    /// running statistics; binary convs consume `sign(master)` via the
    /// straight-through op and their inputs pass through the activation
    /// quantizer (`relu` in full-precision mode).
    pub fn forward(&mut self, g: &mut Graph, images: Tensor, mode: BnMode) -> Result<ForwardOut> {
        let bits = self.config.quant.activation_bits;
        let clip = self.config.quant.ste_clip;
        let per_layer_scale = self.config.quant.per_layer_scale;

        // Leaves are created in registry order so optimizer updates can be
        // zipped positionally with `for_each_param_mut`.
        let mut param_meta = Vec::new();
        let mut tensors: Vec<Tensor> = Vec::new();
        self.for_each_param(|meta, t| {
            param_meta.push(meta);
            tensors.push(t.clone());
        });
        let params: Vec<Var> = tensors.into_iter().map(|t| g.param(t)).collect();

        let mut idx = 0usize;
        let mut next = || {
            let v = params[idx];
            idx += 1;
            v
        };

        let mut binary_masters = Vec::new();
        let mut conv_taps = Vec::new();

        // Helper closures cannot borrow self mutably while iterating, so the
        // wiring below indexes params manually in the registry walk order.
        let x = g.leaf(images);

        let stem_w = next();
        conv_taps.push((self.stem.name.clone(), stem_w));
        let mut x = g.conv2d(x, stem_w, self.stem.stride, self.stem.padding)?;

        let act = |g: &mut Graph, v: Var, binarized_net: bool| -> Result<Var> {
            if binarized_net {
                g.quantize_activation(v, bits)
            } else {
                g.relu(v)
            }
        };
        let binarized_net = self.config.binarize;

        let conv_op = |g: &mut Graph,
                       layer: &ConvLayer,
                       input: Var,
                       w_master: Var,
                       binary_masters: &mut Vec<(String, Var)>,
                       conv_taps: &mut Vec<(String, Var)>|
         -> Result<Var> {
            let w_used = if layer.precision == Precision::Binary {
                binary_masters.push((layer.name.clone(), w_master));
                let bin = g.binarize_ste(w_master, clip)?;
                if per_layer_scale {
                    let alpha = {
                        let m = g.value(w_master);
                        m.data().iter().map(|v| v.abs()).sum::<f64>() / m.numel() as f64
                    };
                    g.scale(bin, alpha)?
                } else {
                    bin
                }
            } else {
                w_master
            };
            conv_taps.push((layer.name.clone(), w_used));
            g.conv2d(input, w_used, layer.stride, layer.padding)
        };

        match &mut self.body {
            Body::Resnet(blocks) => {
                for b in blocks {
                    let g1 = next();
                    let b1 = next();
                    let c1w = next();
                    let g2 = next();
                    let b2 = next();
                    let c2w = next();
                    let scw = b.shortcut.as_ref().map(|_| next());

                    let pre = g.batch_norm(
                        x,
                        g1,
                        b1,
                        b.bn1.running_mean.data_mut(),
                        b.bn1.running_var.data_mut(),
                        b.bn1.momentum,
                        b.bn1.eps,
                        mode,
                    )?;
                    let pre = act(g, pre, binarized_net)?;
                    let shortcut = match (&b.shortcut, scw) {
                        (Some(sc), Some(w)) => {
                            conv_op(g, sc, pre, w, &mut binary_masters, &mut conv_taps)?
                        }
                        _ => x,
                    };
                    let mut out = conv_op(g, &b.conv1, pre, c1w, &mut binary_masters, &mut conv_taps)?;
                    out = g.batch_norm(
                        out,
                        g2,
                        b2,
                        b.bn2.running_mean.data_mut(),
                        b.bn2.running_var.data_mut(),
                        b.bn2.momentum,
                        b.bn2.eps,
                        mode,
                    )?;
                    out = act(g, out, binarized_net)?;
                    out = conv_op(g, &b.conv2, out, c2w, &mut binary_masters, &mut conv_taps)?;
                    x = g.add(out, shortcut)?;
                }
            }
            Body::Lenet(layers) => {
                for (bn, cl) in layers {
                    let ga = next();
                    let be = next();
                    let cw = next();
                    let mut out = g.batch_norm(
                        x,
                        ga,
                        be,
                        bn.running_mean.data_mut(),
                        bn.running_var.data_mut(),
                        bn.momentum,
                        bn.eps,
                        mode,
                    )?;
                    out = act(g, out, binarized_net)?;
                    x = conv_op(g, cl, out, cw, &mut binary_masters, &mut conv_taps)?;
                }
            }
        }

        if let Some(hb) = &mut self.head_bn {
            let ga = next();
            let be = next();
            let out = g.batch_norm(
                x,
                ga,
                be,
                hb.running_mean.data_mut(),
                hb.running_var.data_mut(),
                hb.momentum,
                hb.eps,
                mode,
            )?;
            x = act(g, out, binarized_net)?;
        }

        let pooled = g.global_avg_pool(x)?;
        let fc_w = next();
        let fc_b = next();
        let logits = g.linear(pooled, fc_w, fc_b)?;

        debug_assert_eq!(idx, params.len());
        Ok(ForwardOut { logits, params, param_meta, binary_masters, conv_taps })
    }
}

fn plain(name: String) -> ParamMeta {
    ParamMeta { name, clamp: false, binary_weight: false }
}
