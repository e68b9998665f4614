//! Run configuration with desk-scale defaults and a paper-scale preset.
//!
//! The file format is TOML (or JSON by extension) with one section per
//! module: `data`, `augment`, `cluster`, `pseudolabel`, `network`, `loss`,
//! `train`, `eval`. Every key is optional; missing keys take the defaults
//! documented on the fields.

use std::fs;
use std::path::{Path, PathBuf};

use pixfuse_nn::{Adam, LrSchedule, Optimizer, Sgd};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::cluster::ClusterConfig;
use crate::contrastive::LossConfig;
use crate::error::{config_err, Error, Result};
use crate::fusionnet::NetworkConfig;
use crate::pseudolabel::PseudoConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Learning-rate policy over a run of `epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleConfig {
    Constant,
    /// Multiply by `gamma` every `interval` epochs.
    Step { gamma: f64, interval: usize },
    /// Multiply by `gamma` when each fraction of the run has elapsed.
    Milestones { gamma: f64, fractions: Vec<f64> },
}

impl ScheduleConfig {
    pub fn schedule(&self, epochs: usize) -> LrSchedule {
        match self {
            ScheduleConfig::Constant => LrSchedule::Constant,
            ScheduleConfig::Step { gamma, interval } => LrSchedule::Step { gamma: *gamma, interval: *interval },
            ScheduleConfig::Milestones { gamma, fractions } => LrSchedule::MultiStep {
                gamma: *gamma,
                milestones: fractions.iter().map(|f| (f * epochs as f64).round() as usize).collect(),
            },
        }
    }

    /// Halve at 60% and 85% of the run.
    pub fn desk() -> Self {
        ScheduleConfig::Milestones { gamma: 0.5, fractions: vec![0.6, 0.85] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Adam beta1 or SGD momentum.
    pub momentum: f64,
    /// Scenes per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_schedule: ScheduleConfig,
    /// Write a checkpoint every this many epochs; 0 writes only the last.
    #[serde(default)]
    pub checkpoint_interval: usize,
}

impl TrainConfig {
    pub fn validate(&self, phase: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("{phase}: lr must be positive, weight_decay non-negative, momentum in [0, 1)"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(config_err!("{phase}: batch_size and epochs must be positive"));
        }
        match &self.lr_schedule {
            ScheduleConfig::Step { gamma, interval } if *gamma <= 0.0 || *interval == 0 => {
                Err(config_err!("{phase}: step schedule needs gamma > 0 and interval > 0"))
            }
            ScheduleConfig::Milestones { gamma, fractions } if *gamma <= 0.0 || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) => {
                Err(config_err!("{phase}: milestone fractions must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    pub fn optimizer<T: pixfuse_nn::Float>(&self) -> Optimizer<T> {
        match self.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(self.momentum, self.weight_decay)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(self.momentum, self.weight_decay)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of scene directories; synthetic scenes are generated when
    /// absent.
    pub root: Option<PathBuf>,
    pub n_scenes: usize,
    pub size: usize,
    pub cloud_fraction: f64,
    /// Held-out share used only for evaluation.
    pub test_fraction: f64,
    /// Labelled scenes given to the linear probe.
    pub probe_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, n_scenes: 200, size: 64, cloud_fraction: 0.0, test_fraction: 0.25, probe_scenes: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain: TrainConfig,
    pub linear: TrainConfig,
    /// Classifier on frozen features, trained on pseudo labels.
    pub selftrain1: TrainConfig,
    /// Whole network on the predicted dense labels; `lr` applies outside
    /// the encoders.
    pub selftrain2: TrainConfig,
    /// Learning rate of the encoder parameters during `selftrain2`.
    pub selftrain_encoder_lr: f64,
    /// Running-statistics momentum of batch normalisation.
    pub bn_momentum: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            pretrain: TrainConfig {
                optimizer: OptimizerKind::Adam,
                lr: 3e-4,
                weight_decay: 4e-4,
                momentum: 0.9,
                batch_size: 16,
                epochs: 50,
                lr_schedule: ScheduleConfig::desk(),
                checkpoint_interval: 0,
            },
            linear: TrainConfig {
                optimizer: OptimizerKind::Sgd,
                lr: 0.05,
                weight_decay: 0.0,
                momentum: 0.9,
                batch_size: 8,
                epochs: 50,
                lr_schedule: ScheduleConfig::Constant,
                checkpoint_interval: 0,
            },
            selftrain1: TrainConfig {
                optimizer: OptimizerKind::Adam,
                lr: 3e-4,
                weight_decay: 0.0,
                momentum: 0.9,
                batch_size: 8,
                epochs: 100,
                lr_schedule: ScheduleConfig::Constant,
                checkpoint_interval: 0,
            },
            selftrain2: TrainConfig {
                optimizer: OptimizerKind::Adam,
                lr: 3e-4,
                weight_decay: 0.0,
                momentum: 0.9,
                batch_size: 8,
                epochs: 10,
                lr_schedule: ScheduleConfig::Constant,
                checkpoint_interval: 0,
            },
            selftrain_encoder_lr: 1e-4,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Scenes per inference batch.
    pub batch_size: usize,
    /// Keep at most this many ground-truth pixels per class and probe scene.
    pub probe_label_cap: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 16, probe_label_cap: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for per-scene work.
    pub workers: usize,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub cluster: ClusterConfig,
    pub pseudolabel: PseudoConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale defaults: 64x64 tiles, width 0.25, batch 16, 50 epochs.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Full architecture widths and the published training budget.
    pub fn paper() -> Self {
        let mut cfg = Self::default();
        cfg.network.width_mult = 1.0;
        cfg.train.pretrain.batch_size = 1000;
        cfg.train.pretrain.epochs = 700;
        cfg.train.pretrain.lr_schedule = ScheduleConfig::Step { gamma: 0.5, interval: 200 };
        cfg.train.selftrain1.batch_size = 50;
        cfg.train.selftrain1.epochs = 100;
        cfg.train.selftrain2.batch_size = 50;
        cfg.train.selftrain2.epochs = 100;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(config_err!("unknown preset {other:?} (expected desk or paper)")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.size < 16 || d.size % 8 != 0 {
            return Err(config_err!("data.size must be at least 16 and divisible by 8"));
        }
        if !(0.0..=1.0).contains(&d.cloud_fraction) || !(0.0..1.0).contains(&d.test_fraction) {
            return Err(config_err!("data.cloud_fraction must lie in [0, 1] and test_fraction in [0, 1)"));
        }
        if d.root.is_none() && d.n_scenes == 0 {
            return Err(config_err!("data.n_scenes must be positive"));
        }
        if d.probe_scenes == 0 {
            return Err(config_err!("data.probe_scenes must be positive"));
        }
        self.augment.validate(d.size, d.size)?;
        self.cluster.validate()?;
        if self.pseudolabel.cap == 0 {
            return Err(config_err!("pseudolabel.cap must be positive"));
        }
        self.network.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        t.pretrain.validate("train.pretrain")?;
        if t.pretrain.batch_size < 2 {
            return Err(config_err!("train.pretrain.batch_size must be at least 2"));
        }
        t.linear.validate("train.linear")?;
        t.selftrain1.validate("train.selftrain1")?;
        t.selftrain2.validate("train.selftrain2")?;
        if !(t.selftrain_encoder_lr > 0.0) || !(0.0..=1.0).contains(&t.bn_momentum) {
            return Err(config_err!("train.selftrain_encoder_lr must be positive and bn_momentum in [0, 1]"));
        }
        if self.eval.batch_size == 0 || self.eval.probe_label_cap == Some(0) {
            return Err(config_err!("eval.batch_size and eval.probe_label_cap must be positive"));
        }
        Ok(())
    }

    /// Reads a TOML file, or JSON when the extension is `.json`. Keys the
    /// file leaves out keep their desk defaults, also inside one training
    /// phase.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json = path.extension().is_some_and(|e| e == "json");
        Self::parse(&text, json).map_err(|e| match e {
            Error::Config(msg) => config_err!("{}: {msg}", path.display()),
            other => other,
        })
    }

    /// Parses config text layered over the desk defaults.
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let overlay: serde_json::Value = if json {
            serde_json::from_str(text).map_err(|e| config_err!("{e}"))?
        } else {
            toml::from_str(text).map_err(|e| config_err!("{e}"))?
        };
        let mut value = serde_json::to_value(Self::desk()).expect("config serialises");
        merge(&mut value, overlay);
        let cfg: Self = serde_json::from_value(value).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Overwrites `base` with `overlay` key by key. A table naming a `kind`
/// replaces the old one whole, since its fields depend on the kind.
fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    use serde_json::Value;
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) if !o.contains_key("kind") => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
