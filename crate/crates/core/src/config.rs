//! Run configuration: one flat `key = value` file per run, every seed
//! explicit. Parsing and serialization round-trip exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::adversary::{AttackConfig, StepMode};
use crate::data::{Augmentation, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::optim::{linear_scaled_peak, LrSchedule, OptimHyper, OptimKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Vanilla,
    DisAdv,
    ConAdv,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Vanilla => "vanilla",
            Protocol::DisAdv => "disadv",
            Protocol::ConAdv => "conadv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    WarmupPoly,
    Constant,
}

/// Whether worker passes may run on threads. `Auto` enables them when the
/// machine reports more than one hardware thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadMode {
    Auto,
    On,
    Off,
}

impl ThreadMode {
    pub fn enabled(&self) -> bool {
        match self {
            ThreadMode::On => true,
            ThreadMode::Off => false,
            ThreadMode::Auto => std::thread::available_parallelism()
                .map(|n| n.get() > 1)
                .unwrap_or(false),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub protocol: Protocol,
    /// Staleness of the adversarial buffer (ConAdv).
    pub tau: u64,
    /// Worker count K.
    pub workers: usize,
    pub global_batch: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means "derived from epochs".
    pub max_steps: u64,
    pub model: ModelKind,
    pub mlp_hidden: Vec<usize>,
    pub cnn_channels: (usize, usize),
    pub optimizer: OptimKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coef: f64,
    pub lars_eps: f64,
    pub schedule: ScheduleKind,
    /// Reference rate for the linear-scaling rule (peak = base·batch/256).
    pub base_lr: f64,
    /// Explicit peak rate; `None` applies the linear-scaling rule.
    pub peak_lr: Option<f64>,
    pub warmup_steps: u64,
    pub constant_lr: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub random_init: bool,
    pub step_mode: StepMode,
    pub clamp: Option<(f64, f64)>,
    pub augmentation: Augmentation,
    pub data_seed: u64,
    pub init_seed: u64,
    pub attack_seed: u64,
    pub dataset: DatasetSpec,
    pub out_dir: String,
    /// Metrics file stem; empty derives one from the config.
    pub run_name: String,
    /// ConAdv execution: overlap the update and generation paths.
    pub overlap: bool,
    pub worker_threads: ThreadMode,
    /// Run the clean and adversarial halves of the update on two threads.
    pub split_update: bool,
    /// Test-set evaluation cadence, in epochs.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::ConAdv,
            tau: 1,
            workers: 4,
            global_batch: 512,
            epochs: 20,
            max_steps: 0,
            model: ModelKind::Mlp,
            mlp_hidden: vec![256, 128],
            cnn_channels: (16, 32),
            optimizer: OptimKind::Lars,
            momentum: 0.9,
            weight_decay: 1e-4,
            trust_coef: 0.001,
            lars_eps: 1e-8,
            schedule: ScheduleKind::WarmupPoly,
            base_lr: 4.0,
            peak_lr: None,
            warmup_steps: 5,
            constant_lr: 0.01,
            epsilon: 2.0 / 255.0,
            alpha: 2.0 / 255.0,
            random_init: true,
            step_mode: StepMode::RawGradient,
            clamp: Some((0.0, 1.0)),
            augmentation: Augmentation::None,
            data_seed: 1,
            init_seed: 2,
            attack_seed: 3,
            dataset: DatasetSpec::Blobs {
                n: 4096,
                test: 1024,
                dim: 256,
                num_classes: 10,
                seed: 7,
                noise: 0.18,
                style: crate::data::BlobStyle::Smooth,
            },
            out_dir: "runs".into(),
            run_name: String::new(),
            overlap: true,
            worker_threads: ThreadMode::Auto,
            split_update: false,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.workers == 0 {
            problems.push("workers: must be >= 1".to_string());
        } else {
            if self.global_batch % self.workers != 0 {
                problems.push(format!(
                    "global-batch: {} not divisible by workers {}",
                    self.global_batch, self.workers
                ));
            } else if self.global_batch / self.workers < 2 {
                problems.push(format!(
                    "global-batch: per-worker batch {} < 2",
                    self.global_batch / self.workers
                ));
            }
        }
        if self.epochs == 0 && self.max_steps == 0 {
            problems.push("epochs: need epochs >= 1 or max-steps > 0".into());
        }
        if self.protocol == Protocol::ConAdv && self.overlap && self.tau < 1 {
            problems.push("tau: overlap execution requires tau >= 1".into());
        }
        if !(self.epsilon >= 0.0) {
            problems.push(format!("epsilon: must be >= 0, got {}", self.epsilon));
        }
        if !(self.alpha >= 0.0) {
            problems.push(format!("alpha: must be >= 0, got {}", self.alpha));
        }
        if self.eval_every == 0 {
            problems.push("eval-every: must be >= 1".into());
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                problems.push(format!("clamp: need lo < hi, got {lo},{hi}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            alpha: self.alpha,
            random_init: self.random_init,
            step_mode: self.step_mode,
            clamp_domain: self.clamp,
        }
    }

    pub fn optim_hyper(&self) -> OptimHyper {
        OptimHyper {
            kind: self.optimizer,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            trust_coef: self.trust_coef,
            eps: self.lars_eps,
        }
    }

    pub fn schedule(&self, total_steps: u64) -> LrSchedule {
        match self.schedule {
            ScheduleKind::Constant => LrSchedule::Constant {
                lr: self.constant_lr,
            },
            ScheduleKind::WarmupPoly => LrSchedule::WarmupPoly {
                peak: self
                    .peak_lr
                    .unwrap_or_else(|| linear_scaled_peak(self.base_lr, self.global_batch)),
                warmup: self.warmup_steps.min(total_steps),
                total: total_steps,
            },
        }
    }

    /// Instantiate the model preset against the dataset geometry.
    pub fn model_spec(&self, dataset: &Dataset) -> Result<ModelSpec> {
        match self.model {
            ModelKind::Mlp => Ok(ModelSpec::Mlp {
                input_dim: dataset.input_numel(),
                hidden: self.mlp_hidden.clone(),
                num_classes: dataset.num_classes,
            }),
            ModelKind::Cnn => {
                let (c, h, w) = dataset.image_dims().ok_or_else(|| {
                    Error::Config(format!(
                        "model: cnn needs image-shaped data, dataset shape is {:?}",
                        dataset.input_shape
                    ))
                })?;
                let spec = ModelSpec::Cnn {
                    in_channels: c,
                    height: h,
                    width: w,
                    conv_channels: self.cnn_channels,
                    num_classes: dataset.num_classes,
                };
                spec.validate()?;
                Ok(spec)
            }
        }
    }

    /// Metrics file stem: the explicit run name, or a derived one.
    pub fn effective_run_name(&self) -> String {
        if !self.run_name.is_empty() {
            return self.run_name.clone();
        }
        format!(
            "{}-b{}-k{}-tau{}-s{}",
            self.protocol.as_str(),
            self.global_batch,
            self.workers,
            self.tau,
            self.data_seed
        )
    }

    /// Output directory, honoring the `CONADV_OUT_DIR` override.
    pub fn effective_out_dir(&self) -> String {
        std::env::var("CONADV_OUT_DIR").unwrap_or_else(|_| self.out_dir.clone())
    }

    // -- flat key-value format ------------------------------------------------

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("protocol", self.protocol.as_str().into());
        put("tau", self.tau.to_string());
        put("workers", self.workers.to_string());
        put("global-batch", self.global_batch.to_string());
        put("epochs", self.epochs.to_string());
        put("max-steps", self.max_steps.to_string());
        put(
            "model",
            match self.model {
                ModelKind::Mlp => "mlp".into(),
                ModelKind::Cnn => "cnn".into(),
            },
        );
        put(
            "mlp-hidden",
            self.mlp_hidden
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put(
            "cnn-channels",
            format!("{},{}", self.cnn_channels.0, self.cnn_channels.1),
        );
        put(
            "optimizer",
            match self.optimizer {
                OptimKind::Sgd => "sgd".into(),
                OptimKind::Lars => "lars".into(),
            },
        );
        put("momentum", self.momentum.to_string());
        put("weight-decay", self.weight_decay.to_string());
        put("trust-coef", self.trust_coef.to_string());
        put("lars-eps", self.lars_eps.to_string());
        put(
            "schedule",
            match self.schedule {
                ScheduleKind::WarmupPoly => "warmup-poly".into(),
                ScheduleKind::Constant => "constant".into(),
            },
        );
        put("base-lr", self.base_lr.to_string());
        put(
            "peak-lr",
            self.peak_lr.map_or("auto".into(), |v| v.to_string()),
        );
        put("warmup-steps", self.warmup_steps.to_string());
        put("constant-lr", self.constant_lr.to_string());
        put("epsilon", self.epsilon.to_string());
        put("alpha", self.alpha.to_string());
        put("random-init", self.random_init.to_string());
        put(
            "step-mode",
            match self.step_mode {
                StepMode::RawGradient => "raw".into(),
                StepMode::SignGradient => "sign".into(),
            },
        );
        put(
            "clamp",
            self.clamp
                .map_or("none".into(), |(lo, hi)| format!("{lo},{hi}")),
        );
        put(
            "augmentation",
            match self.augmentation {
                Augmentation::None => "none".into(),
                Augmentation::FlipCrop => "flip-crop".into(),
            },
        );
        put("data-seed", self.data_seed.to_string());
        put("init-seed", self.init_seed.to_string());
        put("attack-seed", self.attack_seed.to_string());
        put("dataset", self.dataset.to_string());
        put("out-dir", self.out_dir.clone());
        put("run-name", self.run_name.clone());
        put("overlap", self.overlap.to_string());
        put(
            "worker-threads",
            match self.worker_threads {
                ThreadMode::Auto => "auto".into(),
                ThreadMode::On => "on".into(),
                ThreadMode::Off => "off".into(),
            },
        );
        put("split-update", self.split_update.to_string());
        put("eval-every", self.eval_every.to_string());
        s
    }

    pub fn from_kv_string(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let k = k.trim().to_string();
            if kv.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key `{k}`")));
            }
        }
        let mut cfg = TrainConfig::default();
        cfg.apply_overrides(kv.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_kv_string(&std::fs::read_to_string(path)?)
    }

    /// Apply `key=value` overrides (the same keys as the file format).
    pub fn apply_overrides<'a>(
        &mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("{key}: {what} (got `{v}`)"));
        match key {
            "protocol" => {
                self.protocol = match v {
                    "vanilla" => Protocol::Vanilla,
                    "disadv" => Protocol::DisAdv,
                    "conadv" => Protocol::ConAdv,
                    _ => return Err(bad("expected vanilla|disadv|conadv")),
                }
            }
            "tau" => self.tau = v.parse().map_err(|_| bad("expected integer"))?,
            "workers" => self.workers = v.parse().map_err(|_| bad("expected integer"))?,
            "global-batch" => {
                self.global_batch = v.parse().map_err(|_| bad("expected integer"))?
            }
            "epochs" => self.epochs = v.parse().map_err(|_| bad("expected integer"))?,
            "max-steps" => self.max_steps = v.parse().map_err(|_| bad("expected integer"))?,
            "model" => {
                self.model = match v {
                    "mlp" => ModelKind::Mlp,
                    "cnn" => ModelKind::Cnn,
                    _ => return Err(bad("expected mlp|cnn")),
                }
            }
            "mlp-hidden" => {
                self.mlp_hidden = v
                    .split(',')
                    .filter(|p| !p.is_empty())
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("expected comma-separated integers"))?
            }
            "cnn-channels" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(bad("expected two comma-separated integers"));
                }
                self.cnn_channels = (
                    parts[0].parse().map_err(|_| bad("expected integer"))?,
                    parts[1].parse().map_err(|_| bad("expected integer"))?,
                );
            }
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimKind::Sgd,
                    "lars" => OptimKind::Lars,
                    _ => return Err(bad("expected sgd|lars")),
                }
            }
            "momentum" => self.momentum = v.parse().map_err(|_| bad("expected float"))?,
            "weight-decay" => self.weight_decay = v.parse().map_err(|_| bad("expected float"))?,
            "trust-coef" => self.trust_coef = v.parse().map_err(|_| bad("expected float"))?,
            "lars-eps" => self.lars_eps = v.parse().map_err(|_| bad("expected float"))?,
            "schedule" => {
                self.schedule = match v {
                    "warmup-poly" => ScheduleKind::WarmupPoly,
                    "constant" => ScheduleKind::Constant,
                    _ => return Err(bad("expected warmup-poly|constant")),
                }
            }
            "base-lr" => self.base_lr = v.parse().map_err(|_| bad("expected float"))?,
            "peak-lr" => {
                self.peak_lr = if v == "auto" {
                    None
                } else {
                    Some(v.parse().map_err(|_| bad("expected float or `auto`"))?)
                }
            }
            "warmup-steps" => self.warmup_steps = v.parse().map_err(|_| bad("expected integer"))?,
            "constant-lr" => self.constant_lr = v.parse().map_err(|_| bad("expected float"))?,
            "epsilon" => self.epsilon = v.parse().map_err(|_| bad("expected float"))?,
            "perturbation" => {
                // Table-style integer level p; stored as ε = p/255.
                let p: f64 = v.parse().map_err(|_| bad("expected number"))?;
                self.epsilon = p / 255.0;
            }
            "alpha" => self.alpha = v.parse().map_err(|_| bad("expected float"))?,
            "random-init" => self.random_init = v.parse().map_err(|_| bad("expected bool"))?,
            "step-mode" => {
                self.step_mode = match v {
                    "raw" => StepMode::RawGradient,
                    "sign" => StepMode::SignGradient,
                    _ => return Err(bad("expected raw|sign")),
                }
            }
            "clamp" => {
                self.clamp = if v == "none" {
                    None
                } else {
                    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                    if parts.len() != 2 {
                        return Err(bad("expected `lo,hi` or `none`"));
                    }
                    Some((
                        parts[0].parse().map_err(|_| bad("expected float"))?,
                        parts[1].parse().map_err(|_| bad("expected float"))?,
                    ))
                }
            }
            "augmentation" => {
                self.augmentation = match v {
                    "none" => Augmentation::None,
                    "flip-crop" => Augmentation::FlipCrop,
                    _ => return Err(bad("expected none|flip-crop")),
                }
            }
            "data-seed" => self.data_seed = v.parse().map_err(|_| bad("expected integer"))?,
            "init-seed" => self.init_seed = v.parse().map_err(|_| bad("expected integer"))?,
            "attack-seed" => self.attack_seed = v.parse().map_err(|_| bad("expected integer"))?,
            "dataset" => self.dataset = DatasetSpec::parse(v)?,
            "out-dir" => self.out_dir = v.to_string(),
            "run-name" => self.run_name = v.to_string(),
            "overlap" => self.overlap = v.parse().map_err(|_| bad("expected bool"))?,
            "worker-threads" => {
                self.worker_threads = match v {
                    "auto" => ThreadMode::Auto,
                    "on" => ThreadMode::On,
                    "off" => ThreadMode::Off,
                    _ => return Err(bad("expected auto|on|off")),
                }
            }
            "split-update" => self.split_update = v.parse().map_err(|_| bad("expected bool"))?,
            "eval-every" => self.eval_every = v.parse().map_err(|_| bad("expected integer"))?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}
