use std::fs::{self, File};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{DatasetSource, RunConfig, Task};
use crate::autodiff::{Mode, Optimizer};
use crate::data::{
    accuracy, gen_synthetic_classification, gen_synthetic_segmentation, load_cifar_binary, make_batch, miou,
    read_container, Augment, LabeledImage, Normalization,
};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{set_precision, Tensor};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.fsds";
pub const MANIFEST_FILE: &str = "run.cfg";

/// Offset between the training and validation synthetic seeds.
const VAL_SEED_OFFSET: u64 = 0x9e37_79b9;

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
}

fn read_file(cfg: &RunConfig, path: &Path) -> Result<Vec<LabeledImage>> {
    let items = match cfg.dataset {
        DatasetSource::Cifar => load_cifar_binary(path, cfg.cifar_variant)?,
        _ => read_container(path)?,
    };
    if items.is_empty() {
        return Err(Error::Input(format!("{} holds no records", path.display())));
    }
    Ok(items)
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    match cfg.dataset {
        DatasetSource::Synthetic => {
            let gen = match cfg.task {
                Task::Classify => gen_synthetic_classification,
                Task::Segment => gen_synthetic_segmentation,
            };
            Ok(Datasets {
                train: gen(&cfg.synthetic(cfg.train_count, cfg.data_seed))?,
                val: gen(&cfg.synthetic(cfg.val_count, cfg.data_seed.wrapping_add(VAL_SEED_OFFSET)))?,
            })
        }
        _ => {
            let train_path = cfg
                .train_path
                .as_ref()
                .ok_or_else(|| Error::Config("field `train_path`: required".into()))?;
            let val_path = cfg
                .val_path
                .as_ref()
                .ok_or_else(|| Error::Config("field `val_path`: required".into()))?;
            let d = Datasets {
                train: read_file(cfg, train_path)?,
                val: read_file(cfg, val_path)?,
            };
            if cfg.task == Task::Segment && d.train.iter().chain(&d.val).any(|i| i.mask.is_none()) {
                return Err(Error::Input("segmentation needs a container with masks".into()));
            }
            Ok(d)
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean training loss of the epoch; `None` for the epoch-0 record.
    pub train_loss: Option<f64>,
    pub task: Task,
    /// Accuracy for classification, mIoU for segmentation.
    pub val_metric: f64,
    pub lr: f64,
    /// Seconds since the start of the run.
    pub wall_time: f64,
}

impl MetricsRecord {
    pub fn metric_name(&self) -> &'static str {
        self.task.metric_name()
    }

    /// With `timing` unset the record is a pure function of the run inputs.
    pub fn to_json(&self, timing: bool) -> Value {
        let mut v = json!({
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            self.metric_name(): self.val_metric,
            "lr": self.lr,
        });
        if timing {
            v["wall_time"] = json!(self.wall_time);
        }
        v
    }
}

fn argmax_channels(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let mut out = Vec::with_capacity(s.n * s.spatial());
    for n in 0..s.n {
        for p in 0..s.spatial() {
            let mut best = 0;
            for c in 1..s.c {
                if logits.plane(n, c)[p] > logits.plane(n, best)[p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Eval-mode accuracy or mIoU in batches of `batch`.
pub fn evaluate(net: &mut Network, images: &[LabeledImage], norm: &Normalization, task: Task, batch: usize) -> Result<f64> {
    let segment = task == Task::Segment;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    // Never read; eval batches are not augmented.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let b = make_batch(&refs, norm, None, segment, &mut rng)?;
        let logits = net.forward(&b.x, Mode::Eval)?;
        pred.extend(argmax_channels(&logits));
        truth.extend(b.labels);
    }
    match task {
        Task::Classify => accuracy(&pred, &truth),
        Task::Segment => miou(&pred, &truth, net.spec.num_classes),
    }
}

pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub network: Network,
    pub norm: Normalization,
}

/// Train on in-memory data; `on_record` sees each record as it is produced.
pub fn train(cfg: &RunConfig, data: &Datasets, mut on_record: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    set_precision(cfg.precision);
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spec = cfg.network_spec(cfg.num_classes())?;
    let mut net = Network::build(&spec, rng.random())?;
    let shape = data.train[0].pixels.shape();
    net.check_input(shape)?;
    let norm = Normalization::fit(&data.train)?;
    let mut opt = Optimizer::new(cfg.optimizer_kind(), cfg.lr, cfg.weight_decay)?;
    let schedule = cfg.lr_schedule();
    let augment = cfg.augment.then_some(Augment {
        pad: (shape.h / 8).max(1),
        flip: true,
    });
    let segment = cfg.task == Task::Segment;

    let mut records = Vec::new();
    let first = MetricsRecord {
        epoch: 0,
        train_loss: None,
        task: cfg.task,
        val_metric: evaluate(&mut net, &data.val, &norm, cfg.task, cfg.eval_batch)?,
        lr: schedule.lr(cfg.lr, 0),
        wall_time: start.elapsed().as_secs_f64(),
    };
    on_record(&first)?;
    records.push(first);

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr(cfg.lr, epoch - 1);
        opt.set_lr(lr);
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            // Batch statistics are undefined for a single sample.
            if idx.len() < 2 {
                continue;
            }
            let refs: Vec<&LabeledImage> = idx.iter().map(|&i| &data.train[i]).collect();
            let b = make_batch(&refs, &norm, augment, segment, &mut rng)?;
            let loss = net.train_batch(&b.x, &b.labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss is {loss} at batch {bi}"),
                });
            }
            opt.step(&mut net.store);
            total += loss;
            batches += 1;
        }
        if let Some(p) = net.store.params().iter().find(|p| !p.value.all_finite()) {
            return Err(Error::Diverged {
                epoch,
                detail: format!("parameter `{}` is not finite", p.name),
            });
        }
        let rec = MetricsRecord {
            epoch,
            train_loss: Some(if batches == 0 { 0.0 } else { total / batches as f64 }),
            task: cfg.task,
            val_metric: evaluate(&mut net, &data.val, &norm, cfg.task, cfg.eval_batch)?,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_record(&rec)?;
        records.push(rec);
    }
    Ok(TrainOutcome {
        records,
        network: net,
        norm,
    })
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

/// Full training run writing `run.cfg`, `metrics.jsonl` and the checkpoint
/// into `out`. `echo` receives every metrics line including wall time.
pub fn run_training(cfg: &RunConfig, out: &Path, mut echo: impl FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_datasets(cfg)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let manifest = out.join(MANIFEST_FILE);
    fs::write(&manifest, cfg.to_text()).map_err(|e| io_err(&manifest, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let outcome = train(cfg, &data, |r| {
        echo(&r.to_json(true).to_string());
        writeln!(metrics, "{}", r.to_json(false)).map_err(|e| io_err(&metrics_path, e))
    })?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.network, &outcome.norm)?;
    Ok(outcome)
}

/// Rebuild the configured network and load a checkpoint into it.
pub fn load_network(cfg: &RunConfig, checkpoint: &Path) -> Result<(Network, Normalization)> {
    cfg.validate()?;
    let mut net = Network::build(&cfg.network_spec(cfg.num_classes())?, 0)?;
    let norm = load_checkpoint(checkpoint, &mut net)?;
    Ok((net, norm))
}

/// Validation metric of a checkpoint on the configured validation set.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<f64> {
    set_precision(cfg.precision);
    let (mut net, norm) = load_network(cfg, checkpoint)?;
    let data = load_datasets(cfg)?;
    net.check_input(data.val[0].pixels.shape())?;
    evaluate(&mut net, &data.val, &norm, cfg.task, cfg.eval_batch)
}
