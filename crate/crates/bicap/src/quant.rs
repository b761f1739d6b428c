//! Weight binarization, its differentiable tanh surrogate, the clipped
//! straight-through gradient, and uniform activation quantization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantization settings shared by the model builders and the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantConfig {
    /// Bits for uniform activation quantization on `[0, 1]`.
    pub activation_bits: u32,
    /// Surrogate sharpness exponent: the surrogate is `tanh(10^k * w)`.
    pub k: i32,
    /// Straight-through clip: task gradients pass where `|master| <= clip`.
    pub ste_clip: f64,
    /// Optional per-layer `mean(|W|)` scaling of the binary weights
    /// (DoReFa-style). Off by default: the binarization rule is scale-free.
    pub per_layer_scale: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig { activation_bits: 4, k: 5, ste_clip: 1.0, per_layer_scale: false }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.activation_bits < 1 {
            return Err(Error::Config("activation_bits must be >= 1".into()));
        }
        if self.k < 0 {
            return Err(Error::Config("surrogate exponent k must be >= 0".into()));
        }
        if self.ste_clip <= 0.0 {
            return Err(Error::Config("ste_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Deterministic binarization: `+1` where `w >= 0`, `-1` otherwise.
pub fn binarize(master: &Tensor) -> Result<Tensor> {
    if master.data().iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("binarize input contains NaN".into()));
    }
    Ok(master.map(|x| if x >= 0.0 { 1.0 } else { -1.0 }))
}

/// Differentiable sign stand-in: `tanh(10^k * w)` elementwise.
pub fn tanh_surrogate(master: &Tensor, k: i32) -> Tensor {
    let scale = 10f64.powi(k);
    master.map(|x| (scale * x).tanh())
}

/// Clipped straight-through gradient: passes `upstream` where
/// `|master| <= clip`, zero elsewhere.
pub fn ste_grad(upstream: &Tensor, master: &Tensor, clip: f64) -> Result<Tensor> {
    if upstream.shape() != master.shape() {
        return Err(Error::Shape(format!(
            "ste_grad: upstream {:?} vs master {:?}",
            upstream.shape(),
            master.shape()
        )));
    }
    let data = upstream
        .data()
        .iter()
        .zip(master.data())
        .map(|(&g, &m)| if m.abs() <= clip { g } else { 0.0 })
        .collect();
    Tensor::from_vec(master.shape(), data)
}

/// Uniform quantization of `clamp(x, 0, 1)` onto the `2^bits`-level lattice.
/// Ties round half away from zero.
pub fn quantize_activation(x: &Tensor, bits: u32) -> Tensor {
    let levels = (1u64 << bits) as f64 - 1.0;
    x.map(|v| (levels * v.clamp(0.0, 1.0)).round() / levels)
}
