//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::attention::BranchScales;
use crate::autodiff::{OptimizerKind, Schedule};
use crate::data::{CifarVariant, SyntheticConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::network::{NetworkSpec, Policy, Scenario};
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    Segment,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Segment => "segment",
        }
    }

    /// Key of the validation metric in metrics records.
    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Classify => "val_accuracy",
            Task::Segment => "val_miou",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic,
    Cifar,
    /// `FSDS` container files.
    Container,
}

impl DatasetSource {
    pub fn name(self) -> &'static str {
        match self {
            DatasetSource::Synthetic => "synthetic",
            DatasetSource::Cifar => "cifar",
            DatasetSource::Container => "container",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Step,
    Poly,
    Cosine,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Step => "step",
            ScheduleKind::Poly => "poly",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub scenario: Scenario,
    pub fusion: FusionKind,
    pub b: usize,
    pub base_channels: usize,
    pub stages: usize,
    pub r: usize,
    pub branch_scales: BranchScales,
    pub policy: Policy,
    pub zero_attention: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: String,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: ScheduleKind,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    pub dataset: DatasetSource,
    pub cifar_variant: CifarVariant,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub train_count: usize,
    pub val_count: usize,
    pub image_size: usize,
    pub classes: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub noise: f64,
    pub distractors: usize,
    pub data_seed: u64,
    pub augment: bool,
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let syn = SyntheticConfig::default();
        RunConfig {
            task: Task::Classify,
            scenario: Scenario::ShortSkip,
            fusion: FusionKind::Aff,
            b: 1,
            base_channels: 16,
            stages: 3,
            r: 4,
            branch_scales: BranchScales::MS_CAM,
            policy: Policy::All,
            zero_attention: false,
            epochs: 30,
            batch_size: 32,
            optimizer: "nesterov".into(),
            lr: 0.1,
            momentum: 0.9,
            schedule: ScheduleKind::Cosine,
            milestones: vec![15, 25],
            gamma: 0.1,
            poly_power: 0.9,
            weight_decay: 1e-4,
            seed: 1,
            precision: Precision::F64,
            dataset: DatasetSource::Synthetic,
            cifar_variant: CifarVariant::Cifar100Coarse,
            train_path: None,
            val_path: None,
            train_count: 5000,
            val_count: 1000,
            image_size: syn.image_size,
            classes: syn.classes,
            scale_min: syn.scale_min,
            scale_max: syn.scale_max,
            noise: syn.noise,
            distractors: syn.distractors,
            data_seed: 0,
            augment: true,
            eval_batch: 100,
        }
    }
}

fn field_err(key: &str, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("field `{key}`: {detail}"))
}

/// Re-scope an error from a nested parser to `key`.
fn nested(key: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => field_err(key, msg),
        other => field_err(key, other),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| field_err(key, format!("cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(field_err(key, format!("expected true or false, got `{v}`"))),
    }
}

fn positive(key: &str, v: usize) -> Result<usize> {
    if v == 0 {
        Err(field_err(key, "must be positive"))
    } else {
        Ok(v)
    }
}

/// Values meaning "feature off" for keys that are recognised only to be refused.
fn is_off(v: &str) -> bool {
    matches!(v, "0" | "0.0" | "false" | "off" | "none" | "no")
}

impl RunConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => {
                self.task = match v {
                    "classify" => Task::Classify,
                    "segment" => Task::Segment,
                    _ => return Err(field_err(key, format!("expected classify or segment, got `{v}`"))),
                }
            }
            "scenario" => self.scenario = Scenario::from_name(v).map_err(|e| nested(key, e))?,
            "fusion" => self.fusion = FusionKind::from_name(v).map_err(|e| nested(key, e))?,
            "b" => self.b = positive(key, num(key, v)?)?,
            "base_channels" => self.base_channels = positive(key, num(key, v)?)?,
            "stages" => self.stages = positive(key, num(key, v)?)?,
            "r" => self.r = positive(key, num(key, v)?)?,
            "branch_scales" => {
                self.branch_scales = BranchScales::from_name(v).ok_or_else(|| {
                    field_err(key, format!("expected global_local, global_global or local_local, got `{v}`"))
                })?
            }
            "policy" => self.policy = Policy::from_name(v).map_err(|e| nested(key, e))?,
            "attention_init" => {
                self.zero_attention = match v {
                    "zero" => true,
                    "kaiming" => false,
                    _ => return Err(field_err(key, format!("expected kaiming or zero, got `{v}`"))),
                }
            }
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => {
                let n: usize = num(key, v)?;
                if n < 2 {
                    return Err(field_err(key, "batch norm needs at least 2 samples per batch"));
                }
                self.batch_size = n;
            }
            "optimizer" => {
                if v != "nesterov" && v != "adagrad" {
                    return Err(field_err(key, format!("expected nesterov or adagrad, got `{v}`")));
                }
                self.optimizer = v.to_string();
            }
            "lr" => {
                let lr: f64 = num(key, v)?;
                if !(lr.is_finite() && lr >= 0.0) {
                    return Err(field_err(key, format!("learning rate must be finite and non-negative, got {lr}")));
                }
                self.lr = lr;
            }
            "momentum" => {
                let m: f64 = num(key, v)?;
                if !(0.0..1.0).contains(&m) {
                    return Err(field_err(key, format!("must lie in [0, 1), got {m}")));
                }
                self.momentum = m;
            }
            "schedule" => {
                self.schedule = match v {
                    "constant" => ScheduleKind::Constant,
                    "step" => ScheduleKind::Step,
                    "poly" => ScheduleKind::Poly,
                    "cosine" => ScheduleKind::Cosine,
                    _ => return Err(field_err(key, format!("unknown schedule `{v}`"))),
                }
            }
            "milestones" => {
                self.milestones = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|m| num(key, m.trim())).collect::<Result<_>>()?
                }
            }
            "gamma" => self.gamma = num(key, v)?,
            "poly_power" => self.poly_power = num(key, v)?,
            "weight_decay" => {
                let wd: f64 = num(key, v)?;
                if !(wd.is_finite() && wd >= 0.0) {
                    return Err(field_err(key, format!("must be non-negative, got {wd}")));
                }
                self.weight_decay = wd;
            }
            "seed" => self.seed = num(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => return Err(field_err(key, format!("expected f32 or f64, got `{v}`"))),
                }
            }
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetSource::Synthetic,
                    "cifar" => DatasetSource::Cifar,
                    "container" => DatasetSource::Container,
                    _ => return Err(field_err(key, format!("expected synthetic, cifar or container, got `{v}`"))),
                }
            }
            "cifar_variant" => self.cifar_variant = CifarVariant::from_name(v).map_err(|e| nested(key, e))?,
            "train_path" => self.train_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "val_path" => self.val_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train_count" => self.train_count = positive(key, num(key, v)?)?,
            "val_count" => self.val_count = positive(key, num(key, v)?)?,
            "image_size" => self.image_size = num(key, v)?,
            "classes" => self.classes = num(key, v)?,
            "scale_min" => self.scale_min = num(key, v)?,
            "scale_max" => self.scale_max = num(key, v)?,
            "noise" => self.noise = num(key, v)?,
            "distractors" => self.distractors = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "augment" => self.augment = boolean(key, v)?,
            "eval_batch" => self.eval_batch = positive(key, num(key, v)?)?,
            "mixup" | "label_smoothing" => {
                if !is_off(v) {
                    return Err(field_err(key, "not supported; remove the key or set it to 0"));
                }
            }
            _ => return Err(field_err(key, "unknown key")),
        }
        Ok(())
    }

    /// Parse a config file body; later keys override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<()> {
        self.network_spec(self.num_classes())?.validate()?;
        if self.dataset == DatasetSource::Synthetic {
            self.synthetic(self.train_count, self.data_seed).validate()?;
        }
        if self.task == Task::Segment && self.scenario != Scenario::LongSkip {
            return Err(field_err("task", "segmentation needs scenario = long_skip"));
        }
        if self.task == Task::Classify && self.scenario == Scenario::LongSkip {
            return Err(field_err("scenario", "long_skip builds a segmenter; set task = segment"));
        }
        if self.task == Task::Segment && self.dataset == DatasetSource::Cifar {
            return Err(field_err("dataset", "CIFAR has no masks"));
        }
        if self.schedule == ScheduleKind::Step && !(self.gamma > 0.0) {
            return Err(field_err("gamma", "must be positive"));
        }
        if self.dataset != DatasetSource::Synthetic && self.train_path.is_none() {
            return Err(field_err("train_path", format!("required for dataset = {}", self.dataset.name())));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match (self.task, self.dataset) {
            (Task::Segment, _) => self.classes + 1,
            (Task::Classify, DatasetSource::Cifar) => self.cifar_variant.num_classes(),
            (Task::Classify, _) => self.classes,
        }
    }

    pub fn network_spec(&self, num_classes: usize) -> Result<NetworkSpec> {
        Ok(NetworkSpec {
            scenario: self.scenario,
            b: self.b,
            base_channels: self.base_channels,
            stages: self.stages,
            in_channels: 3,
            fusion: self.fusion,
            reduction: self.r,
            num_classes,
            policy: self.policy,
            branch_scales: self.branch_scales,
            zero_attention: self.zero_attention,
            zero_head: false,
        })
    }

    pub fn synthetic(&self, count: usize, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            image_size: self.image_size,
            count,
            classes: self.classes,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            noise: self.noise,
            objects: 1,
            distractors: self.distractors,
            seed,
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer.as_str() {
            "adagrad" => OptimizerKind::AdaGrad,
            _ => OptimizerKind::Nesterov { momentum: self.momentum },
        }
    }

    pub fn lr_schedule(&self) -> Schedule {
        match self.schedule {
            ScheduleKind::Constant => Schedule::Constant,
            ScheduleKind::Step => Schedule::Step {
                milestones: self.milestones.clone(),
                gamma: self.gamma,
            },
            ScheduleKind::Poly => Schedule::Poly {
                power: self.poly_power,
                total: self.epochs,
            },
            ScheduleKind::Cosine => Schedule::Cosine { total: self.epochs },
        }
    }

    /// Resolved manifest in the same format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("task", self.task.name().into());
        kv("scenario", self.scenario.name().into());
        kv("fusion", self.fusion.name().into());
        kv("b", self.b.to_string());
        kv("base_channels", self.base_channels.to_string());
        kv("stages", self.stages.to_string());
        kv("r", self.r.to_string());
        kv("branch_scales", self.branch_scales.name().into());
        kv("policy", self.policy.name().into());
        kv("attention_init", if self.zero_attention { "zero" } else { "kaiming" }.into());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("optimizer", self.optimizer.clone());
        kv("lr", format!("{:?}", self.lr));
        kv("momentum", format!("{:?}", self.momentum));
        kv("schedule", self.schedule.name().into());
        kv(
            "milestones",
            self.milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("gamma", format!("{:?}", self.gamma));
        kv("poly_power", format!("{:?}", self.poly_power));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("seed", self.seed.to_string());
        kv(
            "precision",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .into(),
        );
        kv("dataset", self.dataset.name().into());
        kv("cifar_variant", self.cifar_variant.name().into());
        kv(
            "train_path",
            self.train_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv(
            "val_path",
            self.val_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("train_count", self.train_count.to_string());
        kv("val_count", self.val_count.to_string());
        kv("image_size", self.image_size.to_string());
        kv("classes", self.classes.to_string());
        kv("scale_min", format!("{:?}", self.scale_min));
        kv("scale_max", format!("{:?}", self.scale_max));
        kv("noise", format!("{:?}", self.noise));
        kv("distractors", self.distractors.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("augment", self.augment.to_string());
        kv("eval_batch", self.eval_batch.to_string());
        o
    }
}
