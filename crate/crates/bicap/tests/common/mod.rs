//! Shared test oracles, kept independent of the library's kernel paths:
//! naive nested-loop convolution and matmul, a direct cross-entropy
//! evaluation, and a central finite-difference gradient checker.

#![allow(dead_code)]

use bicap::autodiff::{Graph, Var};
use bicap::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Direct 6-loop cross-correlation with zero padding.
pub fn conv2d_naive(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Tensor {
    let is = input.shape();
    let ws = weight.shape();
    let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
    let (f, kh, kw) = (ws[0], ws[2], ws[3]);
    assert_eq!(c, ws[1]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; n * f * oh * ow];
    for nn in 0..n {
        for ff in 0..f {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = 0.0;
                    for cc in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (oi * stride + ki) as isize - padding as isize;
                                let iw = (oj * stride + kj) as isize - padding as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                let xv = x[((nn * c + cc) * h + ih as usize) * w + iw as usize];
                                let wv = wt[((ff * c + cc) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((nn * f + ff) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, f, oh, ow], out).unwrap()
}

/// Triple-loop matrix product of row-major `a: [m,k]` and `b: [k,n]`.
pub fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Cross-entropy evaluated straight from the definition, without the
/// max-subtraction stabilization used by the library path.
pub fn cross_entropy_direct(logits: &Tensor, labels: &[usize]) -> f64 {
    let s = logits.shape();
    let (n, k) = (s[0], s[1]);
    let x = logits.data();
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &x[i * k..(i + 1) * k];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[label].exp() / z).ln();
    }
    total / n as f64
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random values bounded away from zero, for ops with a kink at the origin.
pub fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central finite differences (step `h`) against the tape's backward pass.
///
/// `build` must register one trainable leaf per input tensor, in order, and
/// return the scalar loss. A coordinate passes when the absolute difference
/// is below `1e-7` or the relative error is below `1e-4`.
pub fn assert_grads_match(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Graph, &[Var]) -> bicap::Result<Var>,
) {
    let forward = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars).expect("forward build failed");
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).expect("forward build failed");
    g.backward(loss).expect("backward failed");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|gr| gr.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut worst_rel = 0.0f64;
    for (ti, tensor) in inputs.iter().enumerate() {
        for ci in 0..tensor.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ci] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ci] -= h;
            let numeric = (forward(&plus) - forward(&minus)) / (2.0 * h);
            let a = analytic[ti][ci];
            let abs = (a - numeric).abs();
            if abs < 1e-7 {
                continue;
            }
            let rel = abs / a.abs().max(numeric.abs());
            worst_rel = worst_rel.max(rel);
            assert!(
                rel < 1e-4,
                "gradient mismatch at tensor {ti} coord {ci}: analytic {a:.9e} vs fd {numeric:.9e} (rel {rel:.3e})"
            );
        }
    }
    let _ = worst_rel;
}
