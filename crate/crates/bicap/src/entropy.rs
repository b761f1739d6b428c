//! Per-filter Shannon entropy of binary weight distributions, the network
//! mean entropy, and the information-loss penalty term.
//!
//! A filter is one output-channel slice of a convolution weight tensor. Its
//! entropy is the binary entropy of the probability mass assigned to
//! positive versus negative weights, computed from the sum of absolute
//! values and the signed sum. The penalty steers the network mean entropy
//! toward a target level and differentiates through the tanh surrogate (see
//! [`crate::autodiff::Graph::surrogate_mean_entropy`]).

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::quant::tanh_surrogate;

/// All-zero-filter guard: below this absolute-sum the distribution is
/// treated as balanced. Exact binary filters always have `S = n`, so the
/// guard only protects the surrogate path.
pub const S_GUARD: f64 = 1e-12;

/// Per-filter weight-distribution statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStats {
    /// Sum of absolute weight values.
    pub s: f64,
    /// Signed sum of weight values.
    pub delta: f64,
    /// Probability mass of positive weights.
    pub p: f64,
    /// Probability mass of negative weights.
    pub n_prob: f64,
    /// Binary entropy of the distribution, in [0, 1] bits.
    pub h: f64,
    /// Filter size (element count).
    pub n: usize,
}

/// Statistics of a single filter given as a flat weight slice.
pub fn filter_stats(weights: &[f64]) -> FilterStats {
    let mut s = 0.0;
    let mut delta = 0.0;
    for &w in weights {
        s += w.abs();
        delta += w;
    }
    let (p, n_prob) = if s < S_GUARD {
        (0.5, 0.5)
    } else {
        (((s + delta) / (2.0 * s)).clamp(0.0, 1.0), ((s - delta) / (2.0 * s)).clamp(0.0, 1.0))
    };
    let mut stats = FilterStats { s, delta, p, n_prob, h: 0.0, n: weights.len() };
    stats.h = filter_entropy(&stats);
    stats
}

/// Binary entropy `-(P log2 P + N log2 N)` with the `0 log 0 := 0` convention.
pub fn filter_entropy(stats: &FilterStats) -> f64 {
    fn term(p: f64) -> f64 {
        if p <= 0.0 {
            0.0
        } else {
            p * p.log2()
        }
    }
    -(term(stats.p) + term(stats.n_prob))
}

/// Mean filter entropy over an iterator of flat filter slices.
pub fn mean_entropy_of<'a>(filters: impl Iterator<Item = &'a [f64]>) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for f in filters {
        sum += filter_stats(f).h;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Config("mean_entropy: empty filter scope".into()));
    }
    Ok(sum / count as f64)
}

/// Which weight view the entropy is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightView {
    /// The exact `{-1,+1}` binarization.
    Binary,
    /// The differentiable surrogate `tanh(10^k * master)`.
    Surrogate,
}

/// Which layers the penalty and entropy reports cover.
#[derive(Debug, Clone, PartialEq)]
pub enum EntropyScope {
    /// Every binary-tagged convolution layer (the default).
    AllBinaryConv,
    /// An explicit set of layer names.
    Layers(Vec<String>),
}

/// Configuration of the information-loss penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyConfig {
    /// Target mean entropy `H_e` in `[0, 1]`.
    pub target: f64,
    /// Penalty weight.
    pub lambda: f64,
    /// Surrogate sharpness exponent.
    pub k: i32,
    pub scope: EntropyScope,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig { target: 0.97, lambda: 1e-4, k: 5, scope: EntropyScope::AllBinaryConv }
    }
}

impl EntropyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.target) {
            return Err(Error::Config(format!("target entropy {} outside [0, 1]", self.target)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("penalty weight {} is negative", self.lambda)));
        }
        if self.k < 0 {
            return Err(Error::Config("surrogate exponent k must be >= 0".into()));
        }
        Ok(())
    }

    fn covers(&self, name: &str) -> bool {
        match &self.scope {
            EntropyScope::AllBinaryConv => true,
            EntropyScope::Layers(names) => names.iter().any(|n| n == name),
        }
    }
}

/// Information loss: absolute distance of the mean entropy from the target.
pub fn information_loss(h_mean: f64, h_e: f64) -> f64 {
    (h_e - h_mean).abs()
}

/// Mean entropy over the model's in-scope binary convolution filters.
pub fn mean_entropy(model: &Model, config: &EntropyConfig, view: WeightView) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (name, lw) in model.binary_conv_layers() {
        if !config.covers(name) {
            continue;
        }
        let tensor = match view {
            WeightView::Binary => lw.binary.clone(),
            WeightView::Surrogate => tanh_surrogate(&lw.master, config.k),
        };
        let f = tensor.shape()[0];
        let n = tensor.numel() / f;
        for fi in 0..f {
            sum += filter_stats(&tensor.data()[fi * n..(fi + 1) * n]).h;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config("mean_entropy: no binary filters in scope".into()));
    }
    Ok(sum / count as f64)
}

/// Per-layer entropy summary.
#[derive(Debug, Clone)]
pub struct LayerEntropy {
    pub name: String,
    pub filter_h: Vec<f64>,
    pub mean: f64,
}

/// Snapshot of the network's entropy state at a training step.
#[derive(Debug, Clone)]
pub struct EntropyReport {
    pub layers: Vec<LayerEntropy>,
    /// Mean over all filters (not over per-layer means).
    pub mean: f64,
    pub h_loss: f64,
    pub step: u64,
}

impl EntropyReport {
    pub fn collect(model: &Model, config: &EntropyConfig, view: WeightView, step: u64) -> Result<EntropyReport> {
        let mut layers = Vec::new();
        let mut sum = 0.0;
        let mut count = 0usize;
        for (name, lw) in model.binary_conv_layers() {
            if !config.covers(name) {
                continue;
            }
            let tensor = match view {
                WeightView::Binary => lw.binary.clone(),
                WeightView::Surrogate => tanh_surrogate(&lw.master, config.k),
            };
            let f = tensor.shape()[0];
            let n = tensor.numel() / f;
            let mut hs = Vec::with_capacity(f);
            for fi in 0..f {
                hs.push(filter_stats(&tensor.data()[fi * n..(fi + 1) * n]).h);
            }
            sum += hs.iter().sum::<f64>();
            count += f;
            let mean = hs.iter().sum::<f64>() / f as f64;
            layers.push(LayerEntropy { name: name.to_string(), filter_h: hs, mean });
        }
        if count == 0 {
            return Err(Error::Config("entropy report: no binary filters in scope".into()));
        }
        let mean = sum / count as f64;
        let h_loss = information_loss(mean, config.target);
        Ok(EntropyReport { layers, mean, h_loss, step })
    }

    /// One line per layer plus a global summary, for diagnostic output.
    pub fn summary_lines(&self) -> Vec<String> {
        let mut lines: Vec<String> = self
            .layers
            .iter()
            .map(|l| format!("{}: filters={} mean_h={:.6}", l.name, l.filter_h.len(), l.mean))
            .collect();
        lines.push(format!("mean_entropy={:.6} h_loss={:.6}", self.mean, self.h_loss));
        lines
    }
}

/// Compose `task_loss + lambda * |H_e - mean_entropy(surrogate)|` on the
/// tape. With `lambda == 0` the task loss is returned unchanged; the penalty
/// branch reaches the master weights through the tanh derivative, not the
/// straight-through estimator.
pub fn penalized_loss(
    graph: &mut Graph,
    task_loss: Var,
    masters: &[Var],
    config: &EntropyConfig,
) -> Result<Var> {
    config.validate()?;
    if config.lambda == 0.0 {
        return Ok(task_loss);
    }
    if masters.is_empty() {
        return Err(Error::Config("penalized_loss: empty penalty scope".into()));
    }
    let h_mean = graph.surrogate_mean_entropy(masters, config.k)?;
    let neg = graph.scale(h_mean, -1.0)?;
    let diff = graph.add_const(neg, config.target)?;
    let pen = graph.abs(diff)?;
    let weighted = graph.scale(pen, config.lambda)?;
    graph.add(task_loss, weighted)
}
