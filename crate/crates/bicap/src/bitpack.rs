//! Deployment-path kernels: binary weights packed 64 per machine word, a
//! multiplication-free add/sub convolution against quantized activations,
//! and an XNOR/popcount dot product for fully binary vectors.
//!
//! Bit order is MSB-first within each word, bit 1 means weight `+1`, and
//! trailing pad bits are zero. The add/sub kernel accumulates `+x` or `-x`
//! selected by the weight bit, in a fixed order per output pixel, so outputs
//! are bit-exact whenever inputs are integers (activations arrive scaled by
//! `2^bits - 1`).
//!
//! [`PackedModel`] mirrors a binarized [`Model`] in deployment form with its
//! own evaluation-mode math, kept deliberately independent of the autodiff
//! path so the two inference routes cross-check each other.

use crate::error::{Error, Result};
use crate::model::{Body, Model, Precision};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PackedFilter {
    /// MSB-first bit buffer; `ceil(n/64)` words, pad bits zero.
    pub words: Vec<u64>,
    /// Logical element count.
    pub n: usize,
    /// Original filter dims (e.g. `[C, kh, kw]`).
    pub shape: Vec<usize>,
}

impl PackedFilter {
    pub fn byte_len(&self) -> usize {
        self.words.len() * 8
    }
}

/// Pack a `{-1,+1}` tensor, one bit per element.
pub fn pack(binary: &Tensor) -> Result<PackedFilter> {
    let n = binary.numel();
    let mut words = vec![0u64; n.div_ceil(64)];
    for (i, &v) in binary.data().iter().enumerate() {
        if v == 1.0 {
            words[i / 64] |= 1u64 << (63 - (i % 64));
        } else if v != -1.0 {
            return Err(Error::Config(format!("pack: element {i} is {v}, not in {{-1,+1}}")));
        }
    }
    Ok(PackedFilter { words, n, shape: binary.shape().to_vec() })
}

/// Exact inverse of [`pack`].
pub fn unpack(p: &PackedFilter) -> Tensor {
    let mut data = Vec::with_capacity(p.n);
    for i in 0..p.n {
        let bit = (p.words[i / 64] >> (63 - (i % 64))) & 1;
        data.push(if bit == 1 { 1.0 } else { -1.0 });
    }
    Tensor::from_vec(&p.shape, data).expect("unpack shape")
}

/// Dot product of two packed ±1 vectors: `n - 2 * popcount(a XOR b)`.
pub fn xnor_dot(a: &PackedFilter, b: &PackedFilter) -> Result<i64> {
    if a.n != b.n {
        return Err(Error::Shape(format!("xnor_dot: lengths {} vs {}", a.n, b.n)));
    }
    // Pad bits are zero in both operands, so XOR leaves them zero.
    let differing: u32 = a.words.iter().zip(&b.words).map(|(x, y)| (x ^ y).count_ones()).sum();
    Ok(a.n as i64 - 2 * differing as i64)
}

/// Multiplication-free convolution: accumulates `+x` or `-x` per weight bit.
/// All filters must share the dims recorded in their `shape`.
pub fn binary_conv_addsub(
    input: &Tensor,
    filters: &[PackedFilter],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let ishape = input.shape();
    if ishape.len() != 4 {
        return Err(Error::Shape(format!("binary_conv_addsub expects 4-d input, got {ishape:?}")));
    }
    let first = filters
        .first()
        .ok_or_else(|| Error::Shape("binary_conv_addsub: no filters".into()))?;
    if first.shape.len() != 3 {
        return Err(Error::Shape(format!(
            "binary_conv_addsub expects [C,kh,kw] filters, got {:?}",
            first.shape
        )));
    }
    let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (fc, kh, kw) = (first.shape[0], first.shape[1], first.shape[2]);
    if filters.iter().any(|f| f.shape != first.shape) {
        return Err(Error::Shape("binary_conv_addsub: inconsistent filter dims".into()));
    }
    if fc != c {
        return Err(Error::Shape(format!(
            "binary_conv_addsub channel mismatch: input has {c}, filters expect {fc}"
        )));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::Shape("binary_conv_addsub: kernel exceeds padded input".into()));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let ckk = c * kh * kw;
    let f = filters.len();

    // Per-sample im2row patches: [OH*OW, CKK], rows contiguous so the bit
    // walk below streams linearly.
    let mut rows = vec![0.0; oh * ow * ckk];
    let mut out = vec![0.0; n * f * oh * ow];
    let x = input.data();
    for nn in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let dst = &mut rows[(oi * ow + oj) * ckk..(oi * ow + oj + 1) * ckk];
                let mut r = 0;
                for cc in 0..c {
                    let plane = &x[(nn * c + cc) * h * w..(nn * c + cc + 1) * h * w];
                    for ki in 0..kh {
                        let ih = (oi * stride + ki) as isize - padding as isize;
                        for kj in 0..kw {
                            let iw = (oj * stride + kj) as isize - padding as isize;
                            dst[r] = if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                0.0
                            } else {
                                plane[ih as usize * w + iw as usize]
                            };
                            r += 1;
                        }
                    }
                }
            }
        }
        for (fi, filter) in filters.iter().enumerate() {
            let out_base = (nn * f + fi) * oh * ow;
            for q in 0..oh * ow {
                let patch = &rows[q * ckk..(q + 1) * ckk];
                let mut acc = 0.0;
                for (wi, &word) in filter.words.iter().enumerate() {
                    let base = wi * 64;
                    let take = (ckk - base).min(64);
                    let mut m = word;
                    for &xv in &patch[base..base + take] {
                        if m & (1u64 << 63) != 0 {
                            acc += xv;
                        } else {
                            acc -= xv;
                        }
                        m <<= 1;
                    }
                }
                out[out_base + q] = acc;
            }
        }
    }
    Tensor::from_vec(&[n, f, oh, ow], out)
}

// ── Deployment-form model ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct BnParams {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    eps: f64,
}

impl BnParams {
    fn from_layer(bn: &crate::model::BatchNormLayer) -> BnParams {
        BnParams {
            gamma: bn.gamma.data().to_vec(),
            beta: bn.beta.data().to_vec(),
            running_mean: bn.running_mean.data().to_vec(),
            running_var: bn.running_var.data().to_vec(),
            eps: bn.eps,
        }
    }

    fn apply(&self, x: &mut Tensor) {
        let shape = x.shape().to_vec();
        let (n, c, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
        let data = x.data_mut();
        for nn in 0..n {
            for cc in 0..c {
                let scale = self.gamma[cc] / (self.running_var[cc] + self.eps).sqrt();
                let shift = self.beta[cc] - scale * self.running_mean[cc];
                for v in &mut data[(nn * c + cc) * spatial..(nn * c + cc + 1) * spatial] {
                    *v = scale * *v + shift;
                }
            }
        }
    }

    fn numel(&self) -> usize {
        self.gamma.len() + self.beta.len() + self.running_mean.len() + self.running_var.len()
    }
}

#[derive(Debug, Clone)]
pub struct PackedConv {
    pub name: String,
    pub filters: Vec<PackedFilter>,
    pub stride: usize,
    pub padding: usize,
}

impl PackedConv {
    fn from_layer(c: &crate::model::ConvLayer) -> Result<PackedConv> {
        let shape = c.weights.binary.shape().to_vec();
        let (f, rest) = (shape[0], shape[1] * shape[2] * shape[3]);
        let data = c.weights.binary.data();
        let mut filters = Vec::with_capacity(f);
        for fi in 0..f {
            let slice = Tensor::from_vec(&shape[1..], data[fi * rest..(fi + 1) * rest].to_vec())?;
            filters.push(pack(&slice)?);
        }
        Ok(PackedConv { name: c.name.clone(), filters, stride: c.stride, padding: c.padding })
    }

    pub fn byte_len(&self) -> usize {
        self.filters.iter().map(|f| f.byte_len()).sum()
    }
}

#[derive(Debug, Clone)]
struct DenseConv {
    weight: Tensor,
    stride: usize,
    padding: usize,
}

impl DenseConv {
    fn apply(&self, input: &Tensor) -> Tensor {
        let is = input.shape();
        let ws = self.weight.shape();
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = (h + 2 * self.padding - kh) / self.stride + 1;
        let ow = (w + 2 * self.padding - kw) / self.stride + 1;
        let ckk = c * kh * kw;
        let np = n * oh * ow;
        let mut cols = vec![0.0; ckk * np];
        crate::autodiff::im2col(input.data(), n, c, h, w, kh, kw, self.stride, self.padding, oh, ow, &mut cols);
        let mut y_mat = vec![0.0; f * np];
        matmul(&mut y_mat, self.weight.data(), &cols, f, ckk, np);
        let plane = oh * ow;
        let mut out = vec![0.0; n * f * plane];
        for nn in 0..n {
            for ff in 0..f {
                out[(nn * f + ff) * plane..(nn * f + ff + 1) * plane]
                    .copy_from_slice(&y_mat[ff * np + nn * plane..ff * np + (nn + 1) * plane]);
            }
        }
        Tensor::from_vec(&[n, f, oh, ow], out).expect("dense conv shape")
    }
}

#[derive(Debug, Clone)]
enum PackedBody {
    Resnet(Vec<PackedBlock>),
    Lenet(Vec<(BnParams, PackedConv)>),
}

#[derive(Debug, Clone)]
struct PackedBlock {
    bn1: BnParams,
    conv1: PackedConv,
    bn2: BnParams,
    conv2: PackedConv,
    shortcut: Option<PackedConv>,
}

/// Inference model with bit-packed binary layers and full-precision residue.
#[derive(Debug, Clone)]
pub struct PackedModel {
    pub num_classes: usize,
    activation_bits: u32,
    stem: DenseConv,
    body: PackedBody,
    head_bn: Option<BnParams>,
    fc_weight: Tensor,
    fc_bias: Tensor,
}

impl PackedModel {
    pub fn from_model(model: &Model) -> Result<PackedModel> {
        if !model.config.binarize {
            return Err(Error::Config("cannot pack a non-binarized model".into()));
        }
        if model.stem.precision != Precision::Full {
            return Err(Error::Config("stem must be full precision".into()));
        }
        let stem = DenseConv {
            weight: model.stem.weights.master.clone(),
            stride: model.stem.stride,
            padding: model.stem.padding,
        };
        let body = match &model.body {
            Body::Resnet(blocks) => {
                let mut packed = Vec::with_capacity(blocks.len());
                for b in blocks {
                    packed.push(PackedBlock {
                        bn1: BnParams::from_layer(&b.bn1),
                        conv1: PackedConv::from_layer(&b.conv1)?,
                        bn2: BnParams::from_layer(&b.bn2),
                        conv2: PackedConv::from_layer(&b.conv2)?,
                        shortcut: b.shortcut.as_ref().map(PackedConv::from_layer).transpose()?,
                    });
                }
                PackedBody::Resnet(packed)
            }
            Body::Lenet(layers) => {
                let mut packed = Vec::with_capacity(layers.len());
                for (bn, c) in layers {
                    packed.push((BnParams::from_layer(bn), PackedConv::from_layer(c)?));
                }
                PackedBody::Lenet(packed)
            }
        };
        Ok(PackedModel {
            num_classes: model.config.num_classes,
            activation_bits: model.config.quant.activation_bits,
            stem,
            body,
            head_bn: model.head_bn.as_ref().map(BnParams::from_layer),
            fc_weight: model.classifier.weight.clone(),
            fc_bias: model.classifier.bias.clone(),
        })
    }

    /// Quantize to the activation lattice, run the add/sub kernel on the
    /// integer-scaled values, and return to real scale.
    fn quant_packed_conv(&self, x: &Tensor, conv: &PackedConv) -> Result<Tensor> {
        let levels = (1u64 << self.activation_bits) as f64 - 1.0;
        let scaled = x.map(|v| (levels * v.clamp(0.0, 1.0)).round());
        let mut out = binary_conv_addsub(&scaled, &conv.filters, conv.stride, conv.padding)?;
        for v in out.data_mut() {
            *v /= levels;
        }
        Ok(out)
    }

    fn quantize(&self, x: &Tensor) -> Tensor {
        crate::quant::quantize_activation(x, self.activation_bits)
    }

    /// Evaluation-mode forward pass to logits `[N, num_classes]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = self.stem.apply(images);
        match &self.body {
            PackedBody::Resnet(blocks) => {
                for b in blocks {
                    let mut pre = x.clone();
                    b.bn1.apply(&mut pre);
                    let shortcut = match &b.shortcut {
                        Some(sc) => self.quant_packed_conv(&pre, sc)?,
                        None => x.clone(),
                    };
                    let mut out = self.quant_packed_conv(&pre, &b.conv1)?;
                    b.bn2.apply(&mut out);
                    let out = self.quant_packed_conv(&out, &b.conv2)?;
                    let mut merged = out;
                    for (v, s) in merged.data_mut().iter_mut().zip(shortcut.data()) {
                        *v += s;
                    }
                    x = merged;
                }
            }
            PackedBody::Lenet(layers) => {
                for (bn, conv) in layers {
                    let mut pre = x.clone();
                    bn.apply(&mut pre);
                    x = self.quant_packed_conv(&pre, conv)?;
                }
            }
        }
        if let Some(hb) = &self.head_bn {
            hb.apply(&mut x);
            x = self.quantize(&x);
        }
        // Global average pool then the full-precision classifier.
        let shape = x.shape().to_vec();
        let (n, c, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
        let mut pooled = vec![0.0; n * c];
        for (i, o) in pooled.iter_mut().enumerate() {
            *o = x.data()[i * spatial..(i + 1) * spatial].iter().sum::<f64>() / spatial as f64;
        }
        let k = self.num_classes;
        let d = c;
        let mut logits = vec![0.0; n * k];
        matmul(&mut logits, &pooled, self.fc_weight.data(), n, d, k);
        for row in logits.chunks_exact_mut(k) {
            for (v, b) in row.iter_mut().zip(self.fc_bias.data()) {
                *v += b;
            }
        }
        Tensor::from_vec(&[n, k], logits)
    }

    /// Live-memory byte count: packed binary payload plus 4-byte
    /// full-precision residue (stem, batch-norm parameters and running
    /// statistics, classifier).
    pub fn packed_bytes(&self) -> usize {
        let mut packed = 0usize;
        let mut fp = self.stem.weight.numel() + self.fc_weight.numel() + self.fc_bias.numel();
        match &self.body {
            PackedBody::Resnet(blocks) => {
                for b in blocks {
                    packed += b.conv1.byte_len() + b.conv2.byte_len();
                    if let Some(sc) = &b.shortcut {
                        packed += sc.byte_len();
                    }
                    fp += b.bn1.numel() + b.bn2.numel();
                }
            }
            PackedBody::Lenet(layers) => {
                for (bn, conv) in layers {
                    packed += conv.byte_len();
                    fp += bn.numel();
                }
            }
        }
        if let Some(hb) = &self.head_bn {
            fp += hb.numel();
        }
        packed + 4 * fp
    }
}

/// Deployment byte count of a binarized model: per-filter word-padded packed
/// payload plus the 4-byte full-precision residue (including batch-norm
/// running statistics).
pub fn packed_model_bytes(model: &Model) -> Result<usize> {
    if !model.config.binarize {
        return Err(Error::Config("packed_model_bytes: model is not binarized".into()));
    }
    let mut packed = 0usize;
    for (_, lw) in model.binary_conv_layers() {
        let shape = lw.binary.shape();
        let f = shape[0];
        let n: usize = shape[1..].iter().product();
        packed += f * n.div_ceil(64) * 8;
    }
    let fp_params = model.param_count() - model.binary_weight_count();
    let mut buffers = 0usize;
    model.for_each_buffer(|_, t| buffers += t.numel());
    Ok(packed + 4 * (fp_params + buffers))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_all_ones_fills_a_word() {
        let t = Tensor::full(&[64], 1.0);
        let p = pack(&t).unwrap();
        assert_eq!(p.words, vec![u64::MAX]);
        assert_eq!(p.byte_len(), 8);
    }

    #[test]
    fn pack_alternating_matches_msb_first_layout() {
        let data: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let p = pack(&Tensor::from_vec(&[64], data).unwrap()).unwrap();
        assert_eq!(p.words, vec![0xAAAA_AAAA_AAAA_AAAA]);
    }

    #[test]
    fn pack_65_elements_uses_two_words_with_zero_pad() {
        let t = Tensor::full(&[65], -1.0);
        let p = pack(&t).unwrap();
        assert_eq!(p.words.len(), 2);
        assert_eq!(p.words[1], 0, "pad bits and -1 bits are both zero");
        let u = unpack(&p);
        assert_eq!(u.numel(), 65);
        assert!(u.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn pack_rejects_non_binary_values() {
        let t = Tensor::from_vec(&[3], vec![1.0, 0.5, -1.0]).unwrap();
        assert!(pack(&t).is_err());
    }

    #[test]
    fn xnor_dot_identical_and_opposite() {
        let a = pack(&Tensor::full(&[64], 1.0)).unwrap();
        let b = pack(&Tensor::full(&[64], -1.0)).unwrap();
        assert_eq!(xnor_dot(&a, &a).unwrap(), 64);
        assert_eq!(xnor_dot(&a, &b).unwrap(), -64);
        let c = pack(&Tensor::full(&[65], 1.0)).unwrap();
        assert!(xnor_dot(&a, &c).is_err());
    }

    #[test]
    fn addsub_all_positive_filter_is_sliding_window_sum() {
        let input = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let filter = pack(&Tensor::full(&[1, 2, 2], 1.0)).unwrap();
        let out = binary_conv_addsub(&input, &[filter], 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn addsub_zero_input_gives_zero_output() {
        let input = Tensor::zeros(&[2, 3, 5, 5]);
        let filters: Vec<PackedFilter> =
            (0..4).map(|_| pack(&Tensor::full(&[3, 3, 3], 1.0)).unwrap()).collect();
        let out = binary_conv_addsub(&input, &filters, 1, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn addsub_rejects_geometry_mismatch() {
        let input = Tensor::zeros(&[1, 2, 4, 4]);
        let filter = pack(&Tensor::full(&[3, 3, 3], 1.0)).unwrap();
        assert!(binary_conv_addsub(&input, &[filter], 1, 1).is_err());
    }
}
