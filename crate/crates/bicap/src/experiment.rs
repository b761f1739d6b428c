//! Run configuration and the experiment harness: parses the key=value
//! config format, applies flag overrides, and drives full / binary /
//! binary+penalty arms across seeds, writing per-run metrics CSVs,
//! resolved-config files, and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{save_checkpoint, SaveMeta};
use crate::data::{load_cifar10, load_mnist, normalize, Dataset};
use crate::entropy::{EntropyConfig, EntropyScope};
use crate::error::{Error, Result};
use crate::model::{build_model, Arch, ModelConfig};
use crate::quant::QuantConfig;
use crate::train::{train, EpochMetrics, OptimizerState, TrainConfig, METRICS_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Full,
    Binary,
    Penalty,
}

impl Arm {
    pub fn id(&self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::Binary => "binary",
            Arm::Penalty => "penalty",
        }
    }

    pub fn from_id(s: &str) -> Result<Arm> {
        match s {
            "full" => Ok(Arm::Full),
            "binary" => Ok(Arm::Binary),
            "penalty" => Ok(Arm::Penalty),
            other => Err(Error::Config(format!("unknown arm '{other}' (full|binary|penalty)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Mnist,
}

impl DatasetKind {
    pub fn id(&self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Mnist => "mnist",
        }
    }

    pub fn from_id(s: &str) -> Result<DatasetKind> {
        match s {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "mnist" => Ok(DatasetKind::Mnist),
            other => Err(Error::Config(format!("unknown dataset '{other}' (cifar10|mnist)"))),
        }
    }
}

/// Full run configuration: model, quantization, penalty, training schedule,
/// dataset paths, and experiment arms. Every field has a default; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: Arch,
    pub classes: usize,
    pub width_den: usize,
    pub in_channels: usize,
    pub quant: QuantConfig,
    pub he: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub seed: u64,
    pub seeds: usize,
    pub deterministic: bool,
    pub arms: Vec<Arm>,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Truncate the training split to this many samples (0 = all).
    pub train_limit: usize,
    pub val_limit: usize,
    /// Save a checkpoint every N epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::PreactResNet18,
            classes: 10,
            width_den: 4,
            in_channels: 3,
            quant: QuantConfig::default(),
            he: 0.97,
            lambda: 1e-4,
            epochs: 40,
            batch_size: 128,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            augment: true,
            seed: 1,
            seeds: 1,
            deterministic: false,
            arms: vec![Arm::Binary],
            dataset: DatasetKind::Cifar10,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            train_limit: 0,
            val_limit: 0,
            checkpoint_every: 0,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn width_from_str(v: &str) -> Result<usize> {
    match v {
        "1" => Ok(1),
        "1/2" => Ok(2),
        "1/4" => Ok(4),
        "1/8" => Ok(8),
        _ => Err(Error::Config(format!("width: expected 1, 1/2, 1/4 or 1/8, got '{v}'"))),
    }
}

fn width_to_str(den: usize) -> String {
    if den == 1 {
        "1".to_string()
    } else {
        format!("1/{den}")
    }
}

impl RunConfig {
    /// Apply one `key = value` setting. Both the config-file parser and the
    /// CLI flag overrides route through here.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "arch" => self.arch = Arch::from_id(value)?,
            "classes" => self.classes = parse_num(key, value)?,
            "width" => self.width_den = width_from_str(value)?,
            "in_channels" => self.in_channels = parse_num(key, value)?,
            "act_bits" => self.quant.activation_bits = parse_num(key, value)?,
            "k" => self.quant.k = parse_num(key, value)?,
            "ste_clip" => self.quant.ste_clip = parse_num(key, value)?,
            "per_layer_scale" => self.quant.per_layer_scale = parse_bool(key, value)?,
            "he" => self.he = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr0" => self.lr0 = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "seeds" => self.seeds = parse_num(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "arms" => {
                self.arms = value
                    .split(',')
                    .map(|a| Arm::from_id(a.trim()))
                    .collect::<Result<Vec<_>>>()?;
                if self.arms.is_empty() {
                    return Err(Error::Config("arms: empty list".into()));
                }
            }
            "dataset" => self.dataset = DatasetKind::from_id(value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "train_limit" => self.train_limit = parse_num(key, value)?,
            "val_limit" => self.val_limit = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a UTF-8 key=value config file body (# starts a comment).
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(Arm::Binary).validate()?;
        self.entropy_config().validate()?;
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be >= 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Every effective setting, reparseable as a config file.
    pub fn to_resolved(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "arch = {}", self.arch.id());
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "width = {}", width_to_str(self.width_den));
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "act_bits = {}", self.quant.activation_bits);
        let _ = writeln!(s, "k = {}", self.quant.k);
        let _ = writeln!(s, "ste_clip = {}", self.quant.ste_clip);
        let _ = writeln!(s, "per_layer_scale = {}", self.quant.per_layer_scale);
        let _ = writeln!(s, "he = {}", self.he);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr0 = {}", self.lr0);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "seeds = {}", self.seeds);
        let _ = writeln!(s, "deterministic = {}", self.deterministic);
        let _ = writeln!(
            s,
            "arms = {}",
            self.arms.iter().map(|a| a.id()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(s, "dataset = {}", self.dataset.id());
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "train_limit = {}", self.train_limit);
        let _ = writeln!(s, "val_limit = {}", self.val_limit);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s
    }

    pub fn model_config(&self, arm: Arm) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            num_classes: self.classes,
            width_den: self.width_den,
            in_channels: self.in_channels,
            binarize: arm != Arm::Full,
            quant: self.quant.clone(),
        }
    }

    pub fn entropy_config(&self) -> EntropyConfig {
        EntropyConfig {
            target: self.he,
            lambda: self.lambda,
            k: self.quant.k,
            scope: EntropyScope::AllBinaryConv,
        }
    }

    pub fn train_config(&self, arm: Arm, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            milestones: (0.5, 0.75),
            entropy: (arm == Arm::Penalty).then(|| self.entropy_config()),
            seed,
            deterministic: self.deterministic,
            augment: self.augment,
        }
    }
}

/// Load + normalize the configured dataset, honoring subset limits. Returns
/// the datasets and the training-split normalization constants.
pub fn load_normalized(cfg: &RunConfig) -> Result<(Dataset, Dataset, Vec<f64>, Vec<f64>)> {
    let (train_ds, val_ds) = match cfg.dataset {
        DatasetKind::Cifar10 => load_cifar10(&cfg.data_dir)?,
        DatasetKind::Mnist => load_mnist(&cfg.data_dir)?,
    };
    let mut train_ds = train_ds.truncated(cfg.train_limit);
    let mut val_ds = val_ds.truncated(cfg.val_limit);
    let (c, _, _) = train_ds.image_dims();
    if c != cfg.in_channels {
        return Err(Error::Config(format!(
            "config expects {} input channels but the dataset has {c}",
            cfg.in_channels
        )));
    }
    let (mean, std) = train_ds.channel_stats();
    normalize(&mut train_ds, &mean, &std)?;
    normalize(&mut val_ds, &mean, &std)?;
    Ok((train_ds, val_ds, mean, std))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub arm: Arm,
    pub seed: u64,
    pub metrics: Vec<EpochMetrics>,
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
}

impl RunSummary {
    pub fn final_val_acc(&self) -> f64 {
        self.metrics.last().map(|m| m.val_acc).unwrap_or(0.0)
    }

    pub fn final_mean_entropy(&self) -> f64 {
        self.metrics.last().map(|m| m.mean_entropy).unwrap_or(0.0)
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.metrics.is_empty() {
            return 0.0;
        }
        self.metrics.iter().map(|m| m.seconds).sum::<f64>() / self.metrics.len() as f64
    }
}

pub struct RunProgress<'a> {
    pub arm: Arm,
    pub seed: u64,
    pub metrics: &'a EpochMetrics,
}

/// Run every configured arm across the seed range, writing per-run
/// `config.resolved`, `metrics.csv`, and checkpoints under
/// `out_dir/<arm>/seed_<s>/`.
pub fn run_experiment(
    cfg: &RunConfig,
    mut progress: impl FnMut(&RunProgress),
) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let (train_ds, val_ds, mean, std) = load_normalized(cfg)?;
    let mut summaries = Vec::new();

    for &arm in &cfg.arms {
        for s in 0..cfg.seeds {
            let seed = cfg.seed + s as u64;
            let run_dir = cfg.out_dir.join(arm.id()).join(format!("seed_{seed}"));
            fs::create_dir_all(&run_dir)?;

            let mut resolved = cfg.clone();
            resolved.arms = vec![arm];
            resolved.seed = seed;
            resolved.seeds = 1;
            fs::write(run_dir.join("config.resolved"), resolved.to_resolved())?;

            let mut model = build_model(&cfg.model_config(arm), seed)?;
            model.norm_stats = Some((mean.clone(), std.clone()));
            let train_cfg = cfg.train_config(arm, seed);

            let csv_path = run_dir.join("metrics.csv");
            let mut csv = fs::File::create(&csv_path)?;
            writeln!(csv, "{METRICS_HEADER}")?;

            let entropy_meta = (arm == Arm::Penalty).then(|| cfg.entropy_config());
            let mut epoch_err: Option<Error> = None;
            let metrics = {
                let deterministic = cfg.deterministic;
                let checkpoint_every = cfg.checkpoint_every;
                let run_dir = run_dir.clone();
                let model_ptr: *mut _ = &mut model;
                train(&mut model, &train_ds, &val_ds, &train_cfg, |m| {
                    writeln!(csv, "{}", m.csv_row(deterministic))?;
                    csv.flush()?;
                    progress(&RunProgress { arm, seed, metrics: m });
                    if checkpoint_every > 0 && (m.epoch + 1) % checkpoint_every == 0 {
                        // The trainer holds the &mut Model during the epoch
                        // callback; snapshot through the raw pointer is safe
                        // because training is single-threaded and the model
                        // is not mutated while the callback runs.
                        let snapshot: &crate::model::Model = unsafe { &*model_ptr };
                        let meta = SaveMeta {
                            epoch: m.epoch as u64 + 1,
                            val_acc: Some(m.val_acc),
                            deployment: false,
                            entropy: entropy_meta.clone(),
                        };
                        if let Err(e) = save_checkpoint(
                            snapshot,
                            None,
                            &meta,
                            &run_dir.join(format!("epoch_{:04}.bnnc", m.epoch + 1)),
                        ) {
                            epoch_err = Some(e);
                        }
                    }
                    Ok(())
                })?
            };
            if let Some(e) = epoch_err {
                return Err(e);
            }

            let final_path = run_dir.join("final.bnnc");
            let meta = SaveMeta {
                epoch: cfg.epochs as u64,
                val_acc: metrics.last().map(|m| m.val_acc),
                deployment: false,
                entropy: entropy_meta,
            };
            // Final checkpoint carries fresh optimizer state zeros replaced
            // by the real velocities only when resuming matters; training
            // runs end here, so save without optimizer state.
            let _ = OptimizerState::new(&model);
            save_checkpoint(&model, None, &meta, &final_path)?;

            summaries.push(RunSummary { arm, seed, metrics, run_dir, final_checkpoint: final_path });
        }
    }
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr0, 0.1);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.he, 0.97);
        assert_eq!(cfg.lambda, 1e-4);
        assert_eq!(cfg.quant.activation_bits, 4);
        assert_eq!(cfg.quant.k, 5);
        assert_eq!(cfg.epochs, 40);
        assert_eq!(cfg.batch_size, 128);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("learning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("unknown configuration key"));
    }

    #[test]
    fn parse_and_resolved_round_trip() {
        let text = "width = 1/8\nepochs = 3\narms = binary,penalty\nhe = 0.95\n# comment\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.width_den, 8);
        assert_eq!(cfg.arms, vec![Arm::Binary, Arm::Penalty]);
        let resolved = cfg.to_resolved();
        let re = RunConfig::parse(&resolved).unwrap();
        assert_eq!(cfg, re);
    }

    #[test]
    fn bad_values_are_descriptive() {
        assert!(RunConfig::parse("width = 1/3").is_err());
        assert!(RunConfig::parse("arms = binary,quantum").is_err());
        assert!(RunConfig::parse("epochs = many").is_err());
        assert!(RunConfig::parse("epochs").is_err());
    }
}
